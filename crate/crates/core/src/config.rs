//! Run configuration as a TOML file with one table per component.
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//!
//! [dataset]
//! scans = "velodyne"
//! poses = "poses.txt"
//!
//! [octree]
//! finest_level = 9
//! fine_voxel_size = 0.05
//!
//! [pose]
//! segments = [20, 20, 40]
//! ```
//!
//! Missing keys take their defaults; `sampling` defaults follow the fine
//! voxel size. Relative paths are resolved against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::OctreeConfig;
use crate::mapping::TrainConfig;
use crate::pipeline::{ReplayConfig, SlamConfig};
use crate::pose::PoseOptConfig;
use crate::sampling::SamplingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// A directory of `*.bin` scans, optionally with a pose file.
    #[default]
    Kitti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub kind: DatasetKind,
    pub scans: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<PathBuf>,
    /// Use at most this many scans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub motion_prior: bool,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_iters: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub octree: OctreeConfig,
    #[serde(default)]
    pub sampling: Option<SamplingConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pose: PoseOptConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("output")
}

fn default_true() -> bool {
    true
}

fn default_bootstrap() -> usize {
    SlamConfig::default().bootstrap_iters
}

impl RunConfig {
    /// Parses without touching the file system.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sampling.get_or_insert_with(|| SamplingConfig::for_voxel_size(cfg.octree.fine_voxel_size));
        cfg.slam_config().validate()?;
        Ok(cfg)
    }

    /// Parses, resolves relative paths against `path`'s directory and
    /// checks that the inputs exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        resolve(&mut cfg.dataset.scans);
        if let Some(p) = cfg.dataset.poses.as_mut() {
            resolve(p);
        }
        cfg.check_inputs()?;
        Ok(cfg)
    }

    pub fn check_inputs(&self) -> Result<()> {
        if !self.dataset.scans.is_dir() {
            return Err(Error::Config(format!("scan directory {} does not exist", self.dataset.scans.display())));
        }
        if let Some(p) = &self.dataset.poses {
            if !p.is_file() {
                return Err(Error::Config(format!("pose file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Effective configuration; loading it yields `self` again.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn slam_config(&self) -> SlamConfig {
        let fine = self.octree.fine_voxel_size;
        SlamConfig {
            octree: OctreeConfig { seed: self.seed, ..self.octree.clone() },
            sampling: self.sampling.clone().unwrap_or_else(|| SamplingConfig::for_voxel_size(fine)),
            train: self.train.clone(),
            pose: self.pose.clone(),
            replay: self.replay.clone(),
            motion_prior: self.motion_prior,
            bootstrap_iters: self.bootstrap_iters,
            seed: self.seed,
        }
    }
}

/// `[x, y, z]` arrays for `Vector3<f64>` fields.
pub(crate) mod vec3 {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::from(a))
    }
}
