//! Scan-to-map registration by gradient descent on an SE(3) twist.
//!
//! The map is frozen. Each iteration transforms the scan's sensor-frame
//! samples by the candidate pose, evaluates the squared SDF residual under
//! the active levels, and back-propagates through the query coordinates
//! into the twist.

use nalgebra::{Matrix6, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mapping::{segment_schedule, Adam, AdamConfig};
use crate::network::{LevelMask, NeuralMap};
use crate::sampling::{sensor_samples, BeamSample, LidarScan, SamplingConfig};
use crate::se3::{Pose, Twist};

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseOptConfig {
    /// Iterations per schedule segment; segment `s` activates the `s + 1`
    /// coarsest levels.
    pub segments: Vec<usize>,
    pub lr_translation: f64,
    pub lr_rotation: f64,
    /// Stop early once the step norm stays below this for
    /// `smoothing_window` iterations of the final segment. Zero disables.
    pub tolerance: f64,
    pub max_samples: usize,
    pub min_coverage: f64,
    pub smoothing_window: usize,
    /// Rotate about the sensor origin instead of the world origin.
    pub pivot_at_sensor: bool,
    /// Clear the optimizer moments whenever another level is switched on.
    pub reset_on_level_change: bool,
    /// Learning-rate multiplier reached linearly by the end of the final
    /// segment; 1 keeps the step size fixed.
    pub final_lr_scale: f64,
    pub adam: AdamConfig,
}

impl Default for PoseOptConfig {
    fn default() -> Self {
        Self {
            segments: vec![20, 20, 40],
            lr_translation: 1e-2,
            lr_rotation: 7e-4,
            tolerance: 0.0,
            max_samples: 4096,
            min_coverage: 0.1,
            smoothing_window: 5,
            pivot_at_sensor: true,
            reset_on_level_change: true,
            final_lr_scale: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

impl PoseOptConfig {
    pub fn total_iters(&self) -> usize {
        self.segments.iter().sum()
    }

    /// Every segment at full depth: the flat baseline schedule.
    pub fn all_levels_from_start(&self, n_levels: usize) -> Self {
        let mut segments = vec![0; n_levels];
        segments[n_levels - 1] = self.total_iters();
        Self { segments, ..self.clone() }
    }

    pub fn validate(&self, n_levels: usize) -> Result<()> {
        if self.segments.len() != n_levels {
            return Err(Error::Config(format!("{} pose segments for {n_levels} levels", self.segments.len())));
        }
        if !(self.lr_translation > 0.0 && self.lr_rotation > 0.0) {
            return Err(Error::Config("pose learning rates must be positive".into()));
        }
        if self.max_samples == 0 || self.smoothing_window == 0 {
            return Err(Error::Config("max_samples and smoothing_window must be positive".into()));
        }
        if !(self.final_lr_scale > 0.0 && self.final_lr_scale <= 1.0) {
            return Err(Error::Config("final_lr_scale must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return Err(Error::Config("min_coverage must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Loss and world-frame twist gradient at one pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEval {
    pub loss: f64,
    /// `dL/d delta` for `T <- exp(delta) * T`, ordered `(rho, phi)`.
    pub grad: Vector6<f64>,
    /// Fraction of samples where at least one active level is allocated.
    pub coverage: f64,
    /// Samples observed at every active level; only these enter the loss.
    pub used: usize,
}

/// Deterministic subset of at most `max` samples.
pub fn subsample(samples: Vec<BeamSample>, max: usize, seed: u64) -> Vec<BeamSample> {
    if samples.len() <= max {
        return samples;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, samples.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i]).collect()
}

/// Loss over the given sensor-frame samples placed at `pose`. Only samples
/// observed at every active level count; they must be at least
/// `min_coverage` of the total.
pub fn pose_objective(
    samples: &[BeamSample],
    pose: &Pose,
    map: &NeuralMap,
    mask: LevelMask,
    min_coverage: f64,
) -> Result<PoseEval> {
    if samples.is_empty() {
        return Err(Error::Empty("pose samples".into()));
    }
    let partial: Vec<Partial> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Partial::default();
            for s in chunk {
                let p = pose.transform_point(&s.local);
                let eval = map.predict(&p, mask);
                if eval.any_observed() {
                    acc.seen += 1;
                }
                if !eval.fully_observed() {
                    continue;
                }
                acc.used += 1;
                let r = s.label - eval.value;
                acc.sq += s.weight * r * r;
                let df = map.backward(&eval, 1.0, None);
                let m = p.cross(&df);
                let j = Vector6::new(df.x, df.y, df.z, m.x, m.y, m.z);
                acc.grad += j * (-2.0 * s.weight * r);
            }
            acc
        })
        .collect();
    let mut total = Partial::default();
    for p in partial {
        total.sq += p.sq;
        total.used += p.used;
        total.seen += p.seen;
        total.grad += p.grad;
    }
    let coverage = total.seen as f64 / samples.len() as f64;
    if total.used == 0 || coverage < min_coverage {
        return Err(Error::InsufficientOverlap { coverage, required: min_coverage });
    }
    let inv = 1.0 / total.used as f64;
    Ok(PoseEval { loss: total.sq * inv, grad: total.grad * inv, coverage, used: total.used })
}

#[derive(Default)]
struct Partial {
    sq: f64,
    used: usize,
    seen: usize,
    grad: Vector6<f64>,
}

/// Samples the scan with `seed` and evaluates [`pose_objective`].
pub fn pose_loss_and_grad(
    scan: &LidarScan,
    pose: &Pose,
    map: &NeuralMap,
    mask: LevelMask,
    sampling: &SamplingConfig,
    seed: u64,
    min_coverage: f64,
) -> Result<PoseEval> {
    let samples = sensor_samples(scan, sampling, seed)?;
    pose_objective(&samples, pose, map, mask, min_coverage)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseIterate {
    pub iter: usize,
    pub loss: f64,
    pub step_norm: f64,
    pub active_levels: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseResult {
    pub pose: Pose,
    pub iterations: Vec<PoseIterate>,
    /// Pose at which each entry of `iterations` was measured.
    pub path: Vec<Pose>,
    /// Index into `iterations` of the returned iterate, if any.
    pub best: Option<usize>,
    pub failed: bool,
}

impl PoseResult {
    /// `iter,loss,step_norm,active_levels,coverage` rows.
    pub fn diagnostics_csv(&self) -> String {
        let mut s = String::from("iter,loss,step_norm,active_levels,coverage\n");
        for r in &self.iterations {
            s.push_str(&format!("{},{:e},{:e},{},{:.4}\n", r.iter, r.loss, r.step_norm, r.active_levels, r.coverage));
        }
        s
    }

    pub fn final_coverage(&self) -> Option<f64> {
        self.best.map(|i| self.iterations[i].coverage)
    }
}

/// Registers `scan` against the frozen map starting from `init`.
pub fn estimate_pose(
    scan: &LidarScan,
    init: &Pose,
    map: &NeuralMap,
    cfg: &PoseOptConfig,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<PoseResult> {
    cfg.validate(map.level_count())?;
    let total = cfg.total_iters();
    let mut result = PoseResult { pose: *init, iterations: Vec::new(), path: Vec::new(), best: None, failed: false };
    if total == 0 {
        return Ok(result);
    }
    let samples = subsample(sensor_samples(scan, sampling, seed)?, cfg.max_samples, seed ^ 0x706f_7365);
    let n_levels = map.level_count();
    let final_start = total - cfg.segments[n_levels - 1];

    let mut adam = Adam::new(6, cfg.adam);
    let final_len = cfg.segments[n_levels - 1].max(1) as f64;
    let mut prev_levels = 0;
    let mut pose = *init;
    let mut initial_loss = None;
    let mut above = 0;
    let mut small_steps = 0;

    for iter in 0..=total {
        let last = iter == total;
        let mask = if last { map.all_levels() } else { segment_schedule(iter, &cfg.segments, n_levels)? };
        let eval = match pose_objective(&samples, &pose, map, mask, cfg.min_coverage) {
            Ok(e) => e,
            Err(e @ Error::InsufficientOverlap { .. }) if iter == 0 => return Err(e),
            Err(Error::InsufficientOverlap { .. }) => {
                result.failed = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if !eval.loss.is_finite() {
            result.failed = true;
            break;
        }
        let base = *initial_loss.get_or_insert(eval.loss);
        above = if eval.loss > 10.0 * base { above + 1 } else { 0 };
        if above >= 10 {
            result.failed = true;
            break;
        }
        result.path.push(pose);
        if last {
            result.iterations.push(PoseIterate {
                iter,
                loss: eval.loss,
                step_norm: 0.0,
                active_levels: mask.count(),
                coverage: eval.coverage,
            });
            break;
        }

        let mut g = eval.grad;
        let c = *pose.translation();
        if cfg.pivot_at_sensor {
            // Pivot twist maps to the world twist through [[I, [c]x], [0, I]].
            let mut m = Matrix6::identity();
            m.fixed_view_mut::<3, 3>(0, 3).copy_from(&crate::se3::hat(&c));
            g = m.transpose() * g;
        }
        if cfg.reset_on_level_change && prev_levels != 0 && mask.count() != prev_levels {
            adam = Adam::new(6, cfg.adam);
        }
        prev_levels = mask.count();
        let scale = if iter >= final_start {
            1.0 + (cfg.final_lr_scale - 1.0) * (iter - final_start) as f64 / final_len
        } else {
            1.0
        };
        let lr = |i: usize| scale * if i < 3 { cfg.lr_translation } else { cfg.lr_rotation };
        let mut delta = [0.0; 6];
        adam.step_with(&mut delta, g.as_slice(), lr);
        let delta = Twist::from_vector(&Vector6::from_column_slice(&delta));
        let step = delta.exp()?;
        pose = if cfg.pivot_at_sensor {
            let pivot = Pose::from_translation(c);
            pivot.compose(&step).compose(&pivot.inverse()).compose(&pose)
        } else {
            step.compose(&pose)
        };
        let step_norm = delta.to_vector().norm();
        result.iterations.push(PoseIterate {
            iter,
            loss: eval.loss,
            step_norm,
            active_levels: mask.count(),
            coverage: eval.coverage,
        });
        if iter >= final_start && cfg.tolerance > 0.0 {
            small_steps = if step_norm < cfg.tolerance { small_steps + 1 } else { 0 };
            if small_steps >= cfg.smoothing_window {
                // Record the pose after the final step as the last iterate.
                let eval = pose_objective(&samples, &pose, map, map.all_levels(), cfg.min_coverage);
                if let Ok(e) = eval {
                    result.path.push(pose);
                    result.iterations.push(PoseIterate {
                        iter: iter + 1,
                        loss: e.loss,
                        step_norm: 0.0,
                        active_levels: n_levels,
                        coverage: e.coverage,
                    });
                }
                break;
            }
        }
    }

    if result.failed {
        result.pose = *init;
        return Ok(result);
    }
    // Losses are only comparable under the same mask, so the smoothed
    // minimum is taken over the full-depth tail.
    let losses: Vec<f64> = result.iterations.iter().map(|r| r.loss).collect();
    let tail_start = losses.len().min(final_start);
    let half = cfg.smoothing_window / 2;
    let mut best = (f64::INFINITY, None);
    for k in tail_start..losses.len() {
        let lo = k.saturating_sub(half).max(tail_start);
        let hi = (k + half + 1).min(losses.len());
        let ma = losses[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        if ma < best.0 {
            best = (ma, Some(k));
        }
    }
    if let Some(k) = best.1 {
        result.pose = result.path[k];
        result.best = Some(k);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use crate::field::OctreeConfig;
    use crate::network::NeuralMap;
    use crate::sampling::{RangeClass, SampleKind};
    use rand::Rng;

    fn textured_map(seed: u64, samples: &[BeamSample], pose: &Pose) -> NeuralMap {
        let mut map = NeuralMap::new(OctreeConfig {
            min_corner: Vector3::new(-6.4, -6.4, -6.4),
            finest_level: 8,
            fine_voxel_size: 0.05,
            level_count: 3,
            feature_dim: 3,
            init_scale: 1e-4,
            seed,
        })
        .unwrap();
        let pts: Vec<_> = samples.iter().map(|s| pose.transform_point(&s.local)).collect();
        map.octree.allocate_for_points(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..3 {
            map.octree.level_mut(l).features_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        map
    }

    fn random_samples(n: usize, rng: &mut ChaCha8Rng) -> Vec<BeamSample> {
        (0..n)
            .map(|i| BeamSample {
                local: Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5)),
                label: rng.random_range(-0.15..0.15),
                weight: if i % 2 == 0 { 1.0 } else { 0.5 },
                range_class: RangeClass::Close,
                kind: SampleKind::Surface,
                beam: i as u32,
            })
            .collect()
    }

    #[test]
    fn twist_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = random_samples(64, &mut rng);
        let pose = Twist::new(Vector3::new(0.3, -0.2, 0.1), Vector3::new(0.05, 0.1, -0.2)).exp().unwrap();
        let map = textured_map(11, &samples, &pose);
        let mask = map.all_levels();
        let e = pose_objective(&samples, &pose, &map, mask, 0.0).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let lp = pose_objective(&samples, &pose.retract(&Twist::from_vector(&d)).unwrap(), &map, mask, 0.0).unwrap();
            let lm = pose_objective(&samples, &pose.retract(&Twist::from_vector(&-d)).unwrap(), &map, mask, 0.0).unwrap();
            assert_eq!(lp.used, e.used);
            assert_eq!(lm.used, e.used);
            let fd = (lp.loss - lm.loss) / (2.0 * h);
            let rel = (fd - e.grad[k]).abs() / fd.abs().max(e.grad[k].abs()).max(1e-8);
            assert!(rel < 1e-4, "component {k}: fd {fd} analytic {}", e.grad[k]);
        }
    }

    #[test]
    fn no_overlap_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples = random_samples(32, &mut rng);
        let map = textured_map(12, &samples, &Pose::identity());
        let far = Pose::from_translation(Vector3::new(50.0, 0.0, 0.0));
        match pose_objective(&samples, &far, &map, map.all_levels(), 0.1) {
            Err(Error::InsufficientOverlap { coverage, required }) => {
                assert_eq!(coverage, 0.0);
                assert_eq!(required, 0.1);
            }
            other => panic!("expected insufficient overlap, got {other:?}"),
        }
    }

    #[test]
    fn zero_iterations_return_init() {
        let scan = LidarScan::new(vec![Vector3::new(3.0, 0.0, 0.0)], 0);
        let map = NeuralMap::new(OctreeConfig::default()).unwrap();
        let init = Pose::from_translation(Vector3::new(0.1, 0.2, 0.3));
        let cfg = PoseOptConfig { segments: vec![0, 0, 0], ..PoseOptConfig::default() };
        let r = estimate_pose(&scan, &init, &map, &cfg, &SamplingConfig::default(), 0).unwrap();
        assert_eq!(r.pose, init);
        assert!(r.iterations.is_empty());
    }

    #[test]
    fn map_is_not_modified() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<_> = (0..200).map(|_| Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0))).collect();
        let scan = LidarScan::new(pts, 0);
        let sampling = SamplingConfig::for_voxel_size(0.05);
        let samples = sensor_samples(&scan, &sampling, 1).unwrap();
        let map = textured_map(13, &samples, &Pose::identity());
        let before = map.parameter_checksum();
        let cfg = PoseOptConfig { segments: vec![3, 3, 4], lr_translation: 1e-5, lr_rotation: 1e-6, ..PoseOptConfig::default() };
        let r = estimate_pose(&scan, &Pose::identity(), &map, &cfg, &sampling, 1).unwrap();
        assert_eq!(before, map.parameter_checksum());
        assert!(!r.failed, "{}", r.diagnostics_csv());
        assert_eq!(r.iterations.len(), 11);
        let levels: Vec<_> = r.iterations.iter().map(|i| i.active_levels).collect();
        assert!(levels.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.diagnostics_csv().lines().count() == 12);
    }

    #[test]
    fn config_checks() {
        let cfg = PoseOptConfig::default();
        assert_eq!(cfg.total_iters(), 80);
        assert!(cfg.validate(3).is_ok());
        assert!(cfg.validate(2).is_err());
        let flat = cfg.all_levels_from_start(3);
        assert_eq!(flat.segments, vec![0, 0, 80]);
        assert_eq!(segment_schedule(0, &flat.segments, 3).unwrap(), LevelMask::coarsest(3));
    }
}
