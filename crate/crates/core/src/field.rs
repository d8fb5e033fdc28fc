//! Sparse multi-level octree of learnable corner features with trilinear
//! weighting.
//!
//! Every trainable level is a hashed regular grid: voxels map to eight
//! corner slots, and corners are stored once no matter how many allocated
//! voxels share them. Coordinates are 21-bit per axis, packed into a 63-bit
//! Morton code, so at most 21 octree levels (0..=20) are addressable.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};

pub const MAX_LEVEL: u32 = 20;

/// Corner offsets, bit `d` of the index selects the upper corner along axis `d`.
pub const CORNER_OFFSETS: [[u32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

fn spread_bits(v: u32) -> u64 {
    let mut x = (v as u64) & 0x1f_ffff;
    x = (x | x << 32) & 0x001f_0000_0000_ffff;
    x = (x | x << 16) & 0x001f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

fn compact_bits(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x ^ (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x ^ (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x ^ (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x ^ (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x ^ (x >> 32)) & 0x1f_ffff;
    x as u32
}

/// Interleaves three 21-bit grid coordinates.
pub fn morton_encode(c: [u32; 3]) -> u64 {
    spread_bits(c[0]) | spread_bits(c[1]) << 1 | spread_bits(c[2]) << 2
}

pub fn morton_decode(code: u64) -> [u32; 3] {
    [compact_bits(code), compact_bits(code >> 1), compact_bits(code >> 2)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSpec {
    /// Octree depth `k`; voxel size is `root_size / 2^k`.
    pub level_index: u32,
    pub voxel_size: f64,
    pub feature_dim: usize,
}

/// Geometry and sizing of a [`FeatureOctree`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OctreeConfig {
    /// Lower corner of the cubic world bounds.
    #[serde(with = "crate::config::vec3")]
    pub min_corner: Vector3<f64>,
    pub finest_level: u32,
    pub fine_voxel_size: f64,
    pub level_count: usize,
    pub feature_dim: usize,
    /// Half-width of the uniform feature initialization.
    pub init_scale: f64,
    /// Run configurations derive this from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OctreeConfig {
    fn default() -> Self {
        Self {
            min_corner: Vector3::new(-25.6, -25.6, -25.6),
            finest_level: 10,
            fine_voxel_size: 0.05,
            level_count: 3,
            feature_dim: 3,
            init_scale: 1e-4,
            seed: 0,
        }
    }
}

impl OctreeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fine_voxel_size > 0.0 && self.fine_voxel_size.is_finite()) {
            return Err(Error::InvalidArgument("voxel size must be positive".into()));
        }
        if self.finest_level > MAX_LEVEL {
            return Err(Error::InvalidArgument(format!(
                "finest level {} exceeds the addressable depth {MAX_LEVEL}",
                self.finest_level
            )));
        }
        if self.level_count == 0 || self.level_count as u32 > self.finest_level + 1 {
            return Err(Error::InvalidArgument(format!(
                "level count {} incompatible with finest level {}",
                self.level_count, self.finest_level
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if !self.min_corner.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("world bounds".into()));
        }
        Ok(())
    }

    pub fn root_size(&self) -> f64 {
        self.fine_voxel_size * (1u64 << self.finest_level) as f64
    }

    /// Trainable levels, coarsest first; consecutive voxel sizes halve.
    pub fn level_specs(&self) -> Vec<LevelSpec> {
        let root = self.root_size();
        let first = self.finest_level + 1 - self.level_count as u32;
        (first..=self.finest_level)
            .map(|k| LevelSpec {
                level_index: k,
                voxel_size: root / (1u64 << k) as f64,
                feature_dim: self.feature_dim,
            })
            .collect()
    }
}

/// One trainable level of the octree.
#[derive(Debug, Clone)]
pub struct LevelGrid {
    spec: LevelSpec,
    voxels: FxHashMap<u64, [u32; 8]>,
    corners: FxHashMap<u64, u32>,
    corner_keys: Vec<u64>,
    features: Vec<f64>,
}

impl LevelGrid {
    fn new(spec: LevelSpec) -> Self {
        Self {
            spec,
            voxels: FxHashMap::default(),
            corners: FxHashMap::default(),
            corner_keys: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn spec(&self) -> &LevelSpec {
        &self.spec
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn corner_count(&self) -> usize {
        self.corner_keys.len()
    }

    /// Corner keys in slot order.
    pub fn corner_keys(&self) -> &[u64] {
        &self.corner_keys
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn corner_feature(&self, slot: u32) -> &[f64] {
        let f = self.spec.feature_dim;
        &self.features[slot as usize * f..(slot as usize + 1) * f]
    }

    pub fn corner_slot(&self, key: u64) -> Option<u32> {
        self.corners.get(&key).copied()
    }

    pub fn voxel_corners(&self, key: u64) -> Option<&[u32; 8]> {
        self.voxels.get(&key)
    }

    pub fn contains_voxel(&self, key: u64) -> bool {
        self.voxels.contains_key(&key)
    }

    /// Allocated voxel keys in ascending order.
    pub fn sorted_voxel_keys(&self) -> Vec<u64> {
        let mut keys: Vec<u64> = self.voxels.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    fn insert_corner(&mut self, key: u64, init: impl FnOnce() -> Vec<f64>) -> (u32, bool) {
        if let Some(&slot) = self.corners.get(&key) {
            return (slot, false);
        }
        let slot = self.corner_keys.len() as u32;
        self.corners.insert(key, slot);
        self.corner_keys.push(key);
        self.features.extend(init());
        (slot, true)
    }
}

/// Result of [`FeatureOctree::allocate_for_points`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllocationReport {
    /// New voxels per trainable level, coarsest first.
    pub new_voxels: Vec<usize>,
    pub new_corners: Vec<usize>,
    /// Points outside the world bounds (or non-finite).
    pub skipped: usize,
}

/// Eight corners of the voxel containing a query, with trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBundle {
    pub level: usize,
    pub voxel: [u32; 3],
    pub slots: [u32; 8],
    pub weights: [f64; 8],
    /// In-voxel coordinate `u` in `[0, 1)^3`.
    pub local: Vector3<f64>,
    pub voxel_size: f64,
}

/// Standard trilinear weights for an in-voxel coordinate.
pub fn trilinear_weights(u: &Vector3<f64>) -> [f64; 8] {
    let mut w = [0.0; 8];
    for (j, wj) in w.iter_mut().enumerate() {
        let mut p = 1.0;
        for d in 0..3 {
            p *= if j >> d & 1 == 1 { u[d] } else { 1.0 - u[d] };
        }
        *wj = p;
    }
    w
}

/// `d weight_j / d u`, one row per corner.
pub fn trilinear_weight_derivatives(u: &Vector3<f64>) -> [[f64; 3]; 8] {
    let mut g = [[0.0; 3]; 8];
    for (j, gj) in g.iter_mut().enumerate() {
        let f: [f64; 3] = std::array::from_fn(|d| if j >> d & 1 == 1 { u[d] } else { 1.0 - u[d] });
        let s: [f64; 3] = std::array::from_fn(|d| if j >> d & 1 == 1 { 1.0 } else { -1.0 });
        gj[0] = s[0] * f[1] * f[2];
        gj[1] = f[0] * s[1] * f[2];
        gj[2] = f[0] * f[1] * s[2];
    }
    g
}

impl CornerBundle {
    pub fn corner_keys(&self) -> [u64; 8] {
        std::array::from_fn(|j| {
            let o = CORNER_OFFSETS[j];
            morton_encode([self.voxel[0] + o[0], self.voxel[1] + o[1], self.voxel[2] + o[2]])
        })
    }

    /// Concatenated `z_j = w_j * h_j`, corner-major, written into `out` (length 8F).
    pub fn weighted_features_into(&self, grid: &LevelGrid, out: &mut [f64]) {
        let f = grid.spec.feature_dim;
        for j in 0..8 {
            let h = grid.corner_feature(self.slots[j]);
            let w = self.weights[j];
            for (o, &hv) in out[j * f..(j + 1) * f].iter_mut().zip(h) {
                *o = w * hv;
            }
        }
    }

    /// Plain trilinear interpolation `sum_j w_j h_j`.
    pub fn interpolated_feature(&self, grid: &LevelGrid) -> Vec<f64> {
        let f = grid.spec.feature_dim;
        let mut acc = vec![0.0; f];
        for j in 0..8 {
            let h = grid.corner_feature(self.slots[j]);
            for (a, &hv) in acc.iter_mut().zip(h) {
                *a += self.weights[j] * hv;
            }
        }
        acc
    }

    /// Back-propagates `upstream = dL/dz` (8F, corner-major) through
    /// `z_j = w_j(x) h_j`. Returns `dL/dh` (8F) and `dL/dx` in world units.
    pub fn interpolate_gradients(&self, grid: &LevelGrid, upstream: &[f64]) -> (Vec<f64>, Vector3<f64>) {
        let f = grid.spec.feature_dim;
        let dw = trilinear_weight_derivatives(&self.local);
        let mut feature_grads = vec![0.0; 8 * f];
        let mut coord = Vector3::zeros();
        for j in 0..8 {
            let h = grid.corner_feature(self.slots[j]);
            let up = &upstream[j * f..(j + 1) * f];
            let mut dot = 0.0;
            for i in 0..f {
                feature_grads[j * f + i] = self.weights[j] * up[i];
                dot += up[i] * h[i];
            }
            for d in 0..3 {
                coord[d] += dot * dw[j][d];
            }
        }
        (feature_grads, coord / self.voxel_size)
    }
}

/// Sparse multi-level feature grid.
#[derive(Debug, Clone)]
pub struct FeatureOctree {
    config: OctreeConfig,
    root_size: f64,
    levels: Vec<LevelGrid>,
    rng: ChaCha8Rng,
}

impl FeatureOctree {
    pub fn new(config: OctreeConfig) -> Result<Self> {
        config.validate()?;
        let levels = config.level_specs().into_iter().map(LevelGrid::new).collect();
        Ok(Self {
            root_size: config.root_size(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            levels,
        })
    }

    pub fn config(&self) -> &OctreeConfig {
        &self.config
    }

    pub fn root_size(&self) -> f64 {
        self.root_size
    }

    pub fn min_corner(&self) -> &Vector3<f64> {
        &self.config.min_corner
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[LevelGrid] {
        &self.levels
    }

    pub fn level(&self, level: usize) -> &LevelGrid {
        &self.levels[level]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut LevelGrid {
        &mut self.levels[level]
    }

    pub fn fine_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        (0..3).all(|d| {
            let r = x[d] - self.config.min_corner[d];
            r >= 0.0 && r < self.root_size
        })
    }

    /// Grid coordinates of the voxel containing `x` at `level`, if in bounds.
    pub fn voxel_coords(&self, level: usize, x: &Vector3<f64>) -> Option<[u32; 3]> {
        if !self.contains(x) {
            return None;
        }
        let vs = self.levels[level].spec.voxel_size;
        let cells = 1u32 << self.levels[level].spec.level_index;
        Some(std::array::from_fn(|d| {
            let c = ((x[d] - self.config.min_corner[d]) / vs).floor() as i64;
            c.clamp(0, cells as i64 - 1) as u32
        }))
    }

    pub fn voxel_key(&self, level: usize, x: &Vector3<f64>) -> Option<u64> {
        self.voxel_coords(level, x).map(morton_encode)
    }

    /// World position of a voxel's lower corner.
    pub fn voxel_origin(&self, level: usize, coords: [u32; 3]) -> Vector3<f64> {
        let vs = self.levels[level].spec.voxel_size;
        self.config.min_corner + Vector3::new(coords[0] as f64, coords[1] as f64, coords[2] as f64) * vs
    }

    /// Allocates the containing voxel of every point at every trainable
    /// level. Existing voxels and corner features are left untouched.
    pub fn allocate_for_points(&mut self, points: &[Vector3<f64>]) -> AllocationReport {
        let n_levels = self.levels.len();
        let mut report = AllocationReport {
            new_voxels: vec![0; n_levels],
            new_corners: vec![0; n_levels],
            skipped: 0,
        };
        let f = self.config.feature_dim;
        let scale = self.config.init_scale;
        for p in points {
            if !p.iter().all(|c| c.is_finite()) || !self.contains(p) {
                report.skipped += 1;
                continue;
            }
            for level in 0..n_levels {
                let Some(coords) = self.voxel_coords(level, p) else { continue };
                let key = morton_encode(coords);
                if self.levels[level].voxels.contains_key(&key) {
                    continue;
                }
                let mut slots = [0u32; 8];
                for (j, o) in CORNER_OFFSETS.iter().enumerate() {
                    let ck = morton_encode([coords[0] + o[0], coords[1] + o[1], coords[2] + o[2]]);
                    let rng = &mut self.rng;
                    let (slot, fresh) = self.levels[level].insert_corner(ck, || {
                        (0..f).map(|_| rng.random_range(-scale..=scale)).collect()
                    });
                    slots[j] = slot;
                    report.new_corners[level] += fresh as usize;
                }
                self.levels[level].voxels.insert(key, slots);
                report.new_voxels[level] += 1;
            }
        }
        report
    }

    /// Corner bundle of the voxel containing `x` at `level`.
    pub fn interpolate(&self, level: usize, x: &Vector3<f64>) -> Result<CornerBundle> {
        let grid = &self.levels[level];
        let coords = self.voxel_coords(level, x).ok_or(Error::Unobserved)?;
        let slots = *grid.voxels.get(&morton_encode(coords)).ok_or(Error::Unobserved)?;
        let vs = grid.spec.voxel_size;
        let local = Vector3::from_fn(|d, _| {
            let s = (x[d] - self.config.min_corner[d]) / vs - coords[d] as f64;
            s.clamp(0.0, 1.0)
        });
        Ok(CornerBundle {
            level,
            voxel: coords,
            slots,
            weights: trilinear_weights(&local),
            local,
            voxel_size: vs,
        })
    }

    /// Rebuilds a level from stored keys and features (checkpoint loading).
    pub(crate) fn restore_level(
        &mut self,
        level: usize,
        corner_keys: Vec<u64>,
        features: Vec<f64>,
        voxel_keys: &[u64],
    ) -> Result<()> {
        let f = self.config.feature_dim;
        if features.len() != corner_keys.len() * f {
            return Err(Error::ShapeMismatch(format!(
                "level {level}: {} features for {} corners",
                features.len(),
                corner_keys.len()
            )));
        }
        let mut grid = LevelGrid::new(self.levels[level].spec);
        for (slot, &k) in corner_keys.iter().enumerate() {
            grid.corners.insert(k, slot as u32);
        }
        grid.corner_keys = corner_keys;
        grid.features = features;
        for &vk in voxel_keys {
            let c = morton_decode(vk);
            let mut slots = [0u32; 8];
            for (j, o) in CORNER_OFFSETS.iter().enumerate() {
                let ck = morton_encode([c[0] + o[0], c[1] + o[1], c[2] + o[2]]);
                slots[j] = *grid.corners.get(&ck).ok_or_else(|| {
                    Error::ShapeMismatch(format!("level {level}: voxel {vk} missing corner {ck}"))
                })?;
            }
            grid.voxels.insert(vk, slots);
        }
        self.levels[level] = grid;
        Ok(())
    }

    /// Total stored corner count across levels.
    pub fn total_corners(&self) -> usize {
        self.levels.iter().map(|l| l.corner_count()).sum()
    }
}
