//! Turning posed LiDAR scans into signed-distance training samples.
//!
//! Labels are projective distances along each beam: positive between the
//! sensor and the endpoint, zero at the endpoint, negative behind it, and
//! clamped to the truncation bound.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::NeuralMap;
use crate::se3::Pose;

/// One LiDAR sweep in the sensor frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarScan {
    pub points: Vec<Vector3<f64>>,
    pub intensity: Option<Vec<f32>>,
    pub index: usize,
}

impl LidarScan {
    pub fn new(points: Vec<Vector3<f64>>, index: usize) -> Self {
        Self { points, intensity: None, index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeClass {
    Close,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleOrigin {
    Measured,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// Drawn around a beam endpoint.
    Surface,
    /// Drawn in the free space in front of an endpoint.
    Free,
    /// Self-labelled by the current model.
    Replay,
}

/// A supervised point of the signed-distance objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfSample {
    /// World position (meters).
    pub x: Vector3<f64>,
    /// Truncated signed distance label (meters).
    pub label: f64,
    pub weight: f64,
    pub range_class: RangeClass,
    pub origin: SampleOrigin,
    pub kind: SampleKind,
    /// Index of the source beam within the scan (replay samples: 0).
    pub beam: u32,
}

/// A sample still expressed in the sensor frame, so it can be re-posed
/// without redrawing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamSample {
    pub local: Vector3<f64>,
    pub label: f64,
    pub weight: f64,
    pub range_class: RangeClass,
    pub kind: SampleKind,
    pub beam: u32,
}

impl BeamSample {
    pub fn to_world(&self, pose: &Pose) -> SdfSample {
        SdfSample {
            x: pose.transform_point(&self.local),
            label: self.label,
            weight: self.weight,
            range_class: self.range_class,
            origin: SampleOrigin::Measured,
            kind: self.kind,
            beam: self.beam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub surface_samples: usize,
    pub free_samples: usize,
    /// Standard deviation of the along-beam offset of surface samples.
    pub surface_sigma: f64,
    /// Truncation bound `tau`.
    pub truncation: f64,
    /// Beams shorter than this are close-range.
    pub close_far_split: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub max_beams: usize,
    pub surface_weight: f64,
    pub free_weight: f64,
    pub replay_weight: f64,
}

impl SamplingConfig {
    /// Defaults tied to the fine voxel size.
    pub fn for_voxel_size(fine_voxel: f64) -> Self {
        Self {
            surface_samples: 3,
            free_samples: 3,
            surface_sigma: fine_voxel,
            truncation: 3.0 * fine_voxel,
            close_far_split: 30.0,
            min_range: 1.5,
            max_range: 60.0,
            max_beams: 20_000,
            surface_weight: 1.0,
            free_weight: 0.5,
            replay_weight: 0.5,
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::for_voxel_size(0.05)
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Indices of the beams kept after range filtering and subsampling.
pub fn retained_beams(scan: &LidarScan, cfg: &SamplingConfig) -> Vec<usize> {
    let in_range: Vec<usize> = scan
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let r = p.norm();
            r.is_finite() && r >= cfg.min_range && r <= cfg.max_range
        })
        .map(|(i, _)| i)
        .collect();
    if in_range.len() <= cfg.max_beams {
        return in_range;
    }
    let n = in_range.len();
    (0..cfg.max_beams).map(|i| in_range[i * n / cfg.max_beams]).collect()
}

/// Samples for the given beams in the sensor frame.
pub fn beam_samples(scan: &LidarScan, beams: &[usize], cfg: &SamplingConfig, seed: u64) -> Vec<BeamSample> {
    let tau = cfg.truncation;
    let normal = Normal::new(0.0, cfg.surface_sigma.max(0.0)).expect("finite sigma");
    let mut out = Vec::with_capacity(beams.len() * (cfg.surface_samples + cfg.free_samples));
    for &b in beams {
        let e = scan.points[b];
        let range = e.norm();
        let dir = e / range;
        let range_class = if range < cfg.close_far_split { RangeClass::Close } else { RangeClass::Far };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, b as u64));
        for _ in 0..cfg.surface_samples {
            let s: f64 = normal.sample(&mut rng);
            out.push(BeamSample {
                local: e + dir * s,
                label: (-s).clamp(-tau, tau),
                weight: cfg.surface_weight,
                range_class,
                kind: SampleKind::Surface,
                beam: b as u32,
            });
        }
        let (lo, hi) = (0.1 * range, range - tau);
        if hi > lo {
            for _ in 0..cfg.free_samples {
                let t = rng.random_range(lo..hi);
                out.push(BeamSample {
                    local: dir * t,
                    label: tau,
                    weight: cfg.free_weight,
                    range_class,
                    kind: SampleKind::Free,
                    beam: b as u32,
                });
            }
        }
    }
    out
}

/// Sensor-frame samples of a whole scan.
pub fn sensor_samples(scan: &LidarScan, cfg: &SamplingConfig, seed: u64) -> Result<Vec<BeamSample>> {
    if scan.is_empty() {
        return Err(Error::Empty(format!("scan {} has no points", scan.index)));
    }
    let beams = retained_beams(scan, cfg);
    if beams.is_empty() {
        return Err(Error::Empty(format!("scan {} has no points within range limits", scan.index)));
    }
    Ok(beam_samples(scan, &beams, cfg, seed))
}

/// World-frame training samples of a scan observed from `pose`.
pub fn sample_scan(scan: &LidarScan, pose: &Pose, cfg: &SamplingConfig, seed: u64) -> Result<Vec<SdfSample>> {
    Ok(sensor_samples(scan, cfg, seed)?.iter().map(|s| s.to_world(pose)).collect())
}

/// Self-distillation samples: random points inside the given fine voxels,
/// labelled with the current prediction of all levels.
pub fn make_replay_samples(
    map: &NeuralMap,
    region: &[u64],
    budget: usize,
    cfg: &SamplingConfig,
    seed: u64,
) -> Vec<SdfSample> {
    if region.is_empty() || budget == 0 {
        return Vec::new();
    }
    let fine = map.octree.fine_level();
    let vs = map.fine_voxel_size();
    let all = map.all_levels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(budget);
    let mut attempts = 0;
    while out.len() < budget && attempts < 4 * budget {
        attempts += 1;
        let key = region[rng.random_range(0..region.len())];
        let origin = map.octree.voxel_origin(fine, crate::field::morton_decode(key));
        let x = origin + Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)) * vs;
        let Some(v) = map.value(&x, all) else { continue };
        out.push(SdfSample {
            x,
            label: v.clamp(-cfg.truncation, cfg.truncation),
            weight: cfg.replay_weight,
            range_class: RangeClass::Close,
            origin: SampleOrigin::Replay,
            kind: SampleKind::Replay,
            beam: 0,
        });
    }
    out
}
