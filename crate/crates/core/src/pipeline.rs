//! Sequential tracking and mapping over a scan stream.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::field::{morton_decode, AllocationReport, OctreeConfig};
use crate::mapping::{train_scan, RegularizerState, TrainConfig, TrainReport};
use crate::network::NeuralMap;
use crate::pose::{estimate_pose, PoseOptConfig, PoseResult};
use crate::sampling::{make_replay_samples, mix_seed, sample_scan, LidarScan, SampleKind, SamplingConfig};
use crate::se3::Pose;

/// Poses keyed by strictly increasing scan index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(usize, Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_poses(poses: impl IntoIterator<Item = Pose>) -> Self {
        Self { entries: poses.into_iter().enumerate().collect() }
    }

    pub fn from_entries(entries: Vec<(usize, Pose)>) -> Result<Self> {
        let mut t = Self::new();
        for (i, p) in entries {
            t.push(i, p)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, index: usize, pose: Pose) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if index <= last {
                return Err(Error::InvalidArgument(format!("index {index} does not follow {last}")));
            }
        }
        self.entries.push((index, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, Pose)] {
        &self.entries
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> {
        self.entries.iter().map(|(_, p)| p)
    }

    pub fn last(&self) -> Option<&Pose> {
        self.entries.last().map(|(_, p)| p)
    }

    pub fn get(&self, index: usize) -> Option<&Pose> {
        self.entries.binary_search_by_key(&index, |(i, _)| *i).ok().map(|k| &self.entries[k].1)
    }

    pub fn path_length(&self) -> f64 {
        self.entries.windows(2).map(|w| (w[1].1.translation() - w[0].1.translation()).norm()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub enabled: bool,
    /// Replay samples per scan, as a fraction of the measured samples.
    pub fraction: f64,
    /// Only fine voxels within this distance of the sensor are replayed.
    pub radius: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { enabled: true, fraction: 0.25, radius: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamConfig {
    pub octree: OctreeConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub pose: PoseOptConfig,
    pub replay: ReplayConfig,
    /// Constant-velocity extrapolation of the initial pose.
    pub motion_prior: bool,
    /// Training iterations for the first scan, which has no map to track
    /// against and starts from untrained decoders.
    pub bootstrap_iters: usize,
    pub seed: u64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        let octree = OctreeConfig::default();
        Self {
            sampling: SamplingConfig::for_voxel_size(octree.fine_voxel_size),
            octree,
            train: TrainConfig::default(),
            pose: PoseOptConfig::default(),
            replay: ReplayConfig::default(),
            motion_prior: true,
            bootstrap_iters: 150,
            seed: 0,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        self.octree.validate()?;
        self.train.validate(self.octree.level_count)?;
        self.pose.validate(self.octree.level_count)?;
        if !(0.0..=4.0).contains(&self.replay.fraction) || !(self.replay.radius >= 0.0) {
            return Err(Error::Config("replay fraction must lie in [0, 4] and radius be non-negative".into()));
        }
        if self.bootstrap_iters == 0 {
            return Err(Error::Config("bootstrap_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub index: usize,
    pub pose: Pose,
    pub initial_pose: Pose,
    /// Pose estimation failed and the scan was mapped at its initial pose.
    pub degraded: bool,
    /// Map training diverged and was rolled back.
    pub train_failed: bool,
    pub tracking: Option<PoseResult>,
    pub training: TrainReport,
    pub samples: usize,
    pub replay_samples: usize,
    pub allocation: AllocationReport,
    pub tracking_seconds: f64,
    pub mapping_seconds: f64,
}

impl ScanReport {
    pub const CSV_HEADER: &'static str =
        "index,degraded,train_failed,coverage,final_map_loss,samples,replay_samples,new_fine_corners,tracking_s,mapping_s";

    pub fn csv_row(&self) -> String {
        let coverage = self.tracking.as_ref().and_then(|t| t.final_coverage()).unwrap_or(f64::NAN);
        format!(
            "{},{},{},{:.4},{:e},{},{},{},{:.3},{:.3}",
            self.index,
            self.degraded as u8,
            self.train_failed as u8,
            coverage,
            self.training.final_loss().unwrap_or(f64::NAN),
            self.samples,
            self.replay_samples,
            self.allocation.new_corners.last().copied().unwrap_or(0),
            self.tracking_seconds,
            self.mapping_seconds
        )
    }
}

pub struct SlamState {
    pub config: SlamConfig,
    pub map: NeuralMap,
    pub trajectory: Trajectory,
    pub regularizer: Option<RegularizerState>,
}

impl SlamState {
    pub fn new(config: SlamConfig) -> Result<Self> {
        config.validate()?;
        let map = NeuralMap::new(config.octree.clone())?;
        Ok(Self { config, map, trajectory: Trajectory::new(), regularizer: None })
    }

    /// Resumes from an existing map.
    pub fn with_map(config: SlamConfig, map: NeuralMap) -> Result<Self> {
        config.validate()?;
        if map.octree.config() != &config.octree {
            return Err(Error::Config("map octree does not match the configuration".into()));
        }
        Ok(Self { config, map, trajectory: Trajectory::new(), regularizer: None })
    }

    /// Initial guess for the next scan.
    pub fn predicted_pose(&self) -> Pose {
        let n = self.trajectory.len();
        let e = self.trajectory.entries();
        match n {
            0 => Pose::identity(),
            1 => e[0].1,
            _ if !self.config.motion_prior => e[n - 1].1,
            _ => {
                let (prev, last) = (e[n - 2].1, e[n - 1].1);
                last.compose(&prev.inverse().compose(&last))
            }
        }
    }

    /// Tracks the scan against the current map, then trains the map on it.
    pub fn process_scan(&mut self, scan: &LidarScan) -> Result<ScanReport> {
        let init = self.predicted_pose();
        if self.trajectory.is_empty() {
            return self.map_scan(scan, init, init, None, false, 0.0);
        }
        let start = Instant::now();
        let pose_seed = mix_seed(self.config.seed, 2 * scan.index as u64 + 1);
        let outcome = estimate_pose(scan, &init, &self.map, &self.config.pose, &self.config.sampling, pose_seed);
        let elapsed = start.elapsed().as_secs_f64();
        let (pose, degraded, tracking) = match outcome {
            Ok(r) => (r.pose, r.failed, Some(r)),
            Err(Error::InsufficientOverlap { coverage, .. }) => {
                log::warn!("scan {}: overlap {coverage:.3} too small, mapping at the predicted pose", scan.index);
                (init, true, None)
            }
            Err(e) => return Err(e),
        };
        self.map_scan(scan, pose, init, tracking, degraded, elapsed)
    }

    /// Maps the scan at a known pose.
    pub fn process_scan_with_pose(&mut self, scan: &LidarScan, pose: &Pose) -> Result<ScanReport> {
        self.map_scan(scan, *pose, *pose, None, false, 0.0)
    }

    fn map_scan(
        &mut self,
        scan: &LidarScan,
        pose: Pose,
        initial_pose: Pose,
        tracking: Option<PoseResult>,
        degraded: bool,
        tracking_seconds: f64,
    ) -> Result<ScanReport> {
        let start = Instant::now();
        let cfg = &self.config;
        let map_seed = mix_seed(cfg.seed, 2 * scan.index as u64);
        let mut samples = sample_scan(scan, &pose, &cfg.sampling, map_seed)?;
        let fine = self.map.octree.fine_level();

        let surface: Vec<_> = samples.iter().filter(|s| s.kind == SampleKind::Surface).map(|s| s.x).collect();
        let replay_region = if cfg.replay.enabled && self.regularizer.is_some() {
            let touched: rustc_hash::FxHashSet<u64> =
                surface.iter().filter_map(|x| self.map.octree.voxel_key(fine, x)).collect();
            let center = *pose.translation();
            let half = 0.5 * self.map.fine_voxel_size();
            let r2 = cfg.replay.radius * cfg.replay.radius;
            self.map
                .octree
                .level(fine)
                .sorted_voxel_keys()
                .into_iter()
                .filter(|k| !touched.contains(k))
                .filter(|k| {
                    let c = self.map.octree.voxel_origin(fine, morton_decode(*k)).add_scalar(half);
                    (c - center).norm_squared() <= r2
                })
                .collect()
        } else {
            Vec::new()
        };
        let budget = (cfg.replay.fraction * samples.len() as f64).round() as usize;
        let replay = make_replay_samples(&self.map, &replay_region, budget, &cfg.sampling, map_seed ^ 0x7265_706c);
        let replay_count = replay.len();

        let allocation = self.map.octree.allocate_for_points(&surface);
        let measured = samples.len();
        samples.extend(replay);

        let mut train = cfg.train.clone();
        if self.trajectory.is_empty() {
            train.map_iters = cfg.bootstrap_iters;
        }
        let (training, train_failed) =
            match train_scan(&samples, &mut self.map, &train, &mut self.regularizer, map_seed) {
                Ok(r) => (r, false),
                Err(Error::Diverged(msg)) => {
                    log::warn!("scan {}: {msg}; parameters rolled back", scan.index);
                    (TrainReport::default(), true)
                }
                Err(Error::NoSupervision) => (TrainReport::default(), true),
                Err(e) => return Err(e),
            };
        self.trajectory.push(scan.index, pose)?;
        Ok(ScanReport {
            index: scan.index,
            pose,
            initial_pose,
            degraded,
            train_failed,
            tracking,
            training,
            samples: measured,
            replay_samples: replay_count,
            allocation,
            tracking_seconds,
            mapping_seconds: start.elapsed().as_secs_f64(),
        })
    }
}
