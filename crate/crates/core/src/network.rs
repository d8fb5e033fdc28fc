//! Per-level decoders and the summed multi-level field.
//!
//! Each trainable octree level owns a tiny MLP `(8F + 3) -> 32 -> 32 -> 1`
//! fed with the concatenated weighted corner features and the in-voxel
//! coordinate. The field value is the sum of the active levels' outputs.
//! Derivatives are written out by hand for this fixed architecture.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::{CornerBundle, FeatureOctree, LevelGrid, OctreeConfig};
use crate::error::Result;

pub const HIDDEN: usize = 32;

/// Set of active octree levels, bit `k` for trainable level `k` (0 = coarsest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LevelMask(u32);

impl LevelMask {
    pub const NONE: LevelMask = LevelMask(0);

    pub fn from_bits(bits: u32) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    /// The `n` coarsest levels.
    pub fn coarsest(n: usize) -> Self {
        Self(if n >= 32 { u32::MAX } else { (1u32 << n) - 1 })
    }

    pub fn single(level: usize) -> Self {
        Self(1 << level)
    }

    pub fn contains(self, level: usize) -> bool {
        self.0 >> level & 1 == 1
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn is_subset_of(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn with(self, level: usize) -> Self {
        Self(self.0 | 1 << level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    /// Linear hidden units; only useful to check gradient plumbing.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Softplus => {
                // (softplus, sigmoid) without overflow
                let e = (-x.abs()).exp();
                let sp = x.max(0.0) + e.ln_1p();
                let sig = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                (sp, sig)
            }
            Activation::Identity => (x, 1.0),
        }
    }
}

/// Tiny decoder with parameters in one flat buffer:
/// `[W1 (HIDDEN x in), b1, W2 (HIDDEN x HIDDEN), b2, w3 (HIDDEN), b3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMlp {
    in_dim: usize,
    activation: Activation,
    params: Vec<f64>,
}

struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

/// Cached activations of one MLP evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTape {
    pub input: Vec<f64>,
    /// Activation derivative at each hidden pre-activation.
    pub slope1: [f64; HIDDEN],
    pub act1: [f64; HIDDEN],
    pub slope2: [f64; HIDDEN],
    pub act2: [f64; HIDDEN],
    pub output: f64,
}

impl LevelMlp {
    pub fn param_count_for(in_dim: usize) -> usize {
        HIDDEN * in_dim + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1
    }

    pub fn input_dim_for(feature_dim: usize) -> usize {
        8 * feature_dim + 3
    }

    pub fn zeros(in_dim: usize) -> Self {
        Self { in_dim, activation: Activation::Softplus, params: vec![0.0; Self::param_count_for(in_dim)] }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn random(in_dim: usize, rng: &mut impl Rng) -> Self {
        let mut mlp = Self::zeros(in_dim);
        let o = mlp.offsets();
        let b1 = 1.0 / (in_dim as f64).sqrt();
        let bh = 1.0 / (HIDDEN as f64).sqrt();
        for v in &mut mlp.params[..o.b1] {
            *v = rng.random_range(-b1..b1);
        }
        for v in &mut mlp.params[o.w2..o.b2] {
            *v = rng.random_range(-bh..bh);
        }
        for v in &mut mlp.params[o.w3..o.b3] {
            *v = rng.random_range(-bh..bh);
        }
        mlp
    }

    /// Decoder initialization used by [`NeuralMap::new`]. The in-voxel
    /// coordinate columns start at zero, so an untrained level has no
    /// built-in slope along the local axes. `silent` also zeroes the output
    /// layer (the level starts contributing exactly nothing); otherwise the
    /// output bias cancels the response to zero features.
    pub fn decoder(in_dim: usize, silent: bool, rng: &mut impl Rng) -> Self {
        let mut mlp = Self::random(in_dim, rng);
        for h in 0..HIDDEN {
            mlp.params[(h + 1) * in_dim - 3..(h + 1) * in_dim].fill(0.0);
        }
        let o = mlp.offsets();
        if silent {
            mlp.params[o.w3..].fill(0.0);
        } else {
            let y = mlp.forward(vec![0.0; in_dim]).output;
            mlp.params[o.b3] = -y;
        }
        mlp
    }

    pub fn from_params(in_dim: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_count_for(in_dim) {
            return Err(crate::Error::ShapeMismatch(format!(
                "MLP with input {in_dim} needs {} parameters, got {}",
                Self::param_count_for(in_dim),
                params.len()
            )));
        }
        Ok(Self { in_dim, activation: Activation::Softplus, params })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> Offsets {
        let b1 = HIDDEN * self.in_dim;
        let w2 = b1 + HIDDEN;
        let b2 = w2 + HIDDEN * HIDDEN;
        let w3 = b2 + HIDDEN;
        let b3 = w3 + HIDDEN;
        Offsets { b1, w2, b2, w3, b3 }
    }

    pub fn output_bias_index(&self) -> usize {
        self.offsets().b3
    }

    pub fn forward(&self, input: Vec<f64>) -> MlpTape {
        debug_assert_eq!(input.len(), self.in_dim);
        let o = self.offsets();
        let p = &self.params;
        let mut tape = MlpTape {
            input,
            slope1: [0.0; HIDDEN],
            act1: [0.0; HIDDEN],
            slope2: [0.0; HIDDEN],
            act2: [0.0; HIDDEN],
            output: 0.0,
        };
        for i in 0..HIDDEN {
            let row = &p[i * self.in_dim..(i + 1) * self.in_dim];
            let mut s = p[o.b1 + i];
            for (w, x) in row.iter().zip(&tape.input) {
                s += w * x;
            }
            let (a, d) = self.activation.apply(s);
            tape.act1[i] = a;
            tape.slope1[i] = d;
        }
        for i in 0..HIDDEN {
            let row = &p[o.w2 + i * HIDDEN..o.w2 + (i + 1) * HIDDEN];
            let mut s = p[o.b2 + i];
            for (w, x) in row.iter().zip(&tape.act1) {
                s += w * x;
            }
            let (a, d) = self.activation.apply(s);
            tape.act2[i] = a;
            tape.slope2[i] = d;
        }
        let mut y = p[o.b3];
        for (w, x) in p[o.w3..o.b3].iter().zip(&tape.act2) {
            y += w * x;
        }
        tape.output = y;
        tape
    }

    /// Reverse pass for `dL/dy = upstream`. Accumulates parameter gradients
    /// into `param_grad` when given; writes `dL/dinput` into `input_grad`.
    pub fn backward(&self, tape: &MlpTape, upstream: f64, param_grad: Option<&mut [f64]>, input_grad: &mut [f64]) {
        let o = self.offsets();
        let p = &self.params;
        let mut d2 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            d2[i] = upstream * p[o.w3 + i] * tape.slope2[i];
        }
        let mut d1 = [0.0; HIDDEN];
        for (i, &g) in d2.iter().enumerate() {
            let row = &p[o.w2 + i * HIDDEN..o.w2 + (i + 1) * HIDDEN];
            for (acc, w) in d1.iter_mut().zip(row) {
                *acc += g * w;
            }
        }
        for i in 0..HIDDEN {
            d1[i] *= tape.slope1[i];
        }
        input_grad.iter_mut().for_each(|v| *v = 0.0);
        for (i, &g) in d1.iter().enumerate() {
            let row = &p[i * self.in_dim..(i + 1) * self.in_dim];
            for (acc, w) in input_grad.iter_mut().zip(row) {
                *acc += g * w;
            }
        }
        if let Some(gp) = param_grad {
            for (i, &g) in d1.iter().enumerate() {
                let row = &mut gp[i * self.in_dim..(i + 1) * self.in_dim];
                for (acc, x) in row.iter_mut().zip(&tape.input) {
                    *acc += g * x;
                }
                gp[o.b1 + i] += g;
            }
            for (i, &g) in d2.iter().enumerate() {
                let row = &mut gp[o.w2 + i * HIDDEN..o.w2 + (i + 1) * HIDDEN];
                for (acc, x) in row.iter_mut().zip(&tape.act1) {
                    *acc += g * x;
                }
                gp[o.b2 + i] += g;
            }
            for i in 0..HIDDEN {
                gp[o.w3 + i] += upstream * tape.act2[i];
            }
            gp[o.b3] += upstream;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// Forward record of one level at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTape {
    pub bundle: CornerBundle,
    pub mlp: MlpTape,
}

/// Output of [`NeuralMap::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub value: f64,
    /// One entry per trainable level; `None` when inactive or unobserved.
    pub tapes: Vec<Option<LevelTape>>,
    pub active: LevelMask,
    /// Active levels whose voxel at the query is allocated.
    pub observed: LevelMask,
}

impl FieldEval {
    pub fn fully_observed(&self) -> bool {
        self.observed == self.active
    }

    pub fn partially_observed(&self) -> bool {
        !self.fully_observed()
    }

    pub fn any_observed(&self) -> bool {
        !self.observed.is_empty()
    }
}

/// Sparse gradient record for one chunk of samples: dense MLP gradients,
/// feature gradients as `(level, slot)` entries in emission order.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub mlp: Vec<Vec<f64>>,
    pub feature_index: Vec<(u32, u32)>,
    pub feature_values: Vec<f64>,
    feature_dim: usize,
}

impl GradientBuffer {
    pub fn new(model: &NeuralMap) -> Self {
        Self {
            mlp: model.mlps.iter().map(|m| vec![0.0; m.params.len()]).collect(),
            feature_index: Vec::new(),
            feature_values: Vec::new(),
            feature_dim: model.octree.feature_dim(),
        }
    }

    pub fn clear(&mut self) {
        self.mlp.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        self.feature_index.clear();
        self.feature_values.clear();
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
}

/// Dense gradients aligned with every live parameter of a [`NeuralMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradients {
    pub mlp: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl DenseGradients {
    pub fn zeros(model: &NeuralMap) -> Self {
        Self {
            mlp: model.mlps.iter().map(|m| vec![0.0; m.params.len()]).collect(),
            features: model.octree.levels().iter().map(|l| vec![0.0; l.features().len()]).collect(),
        }
    }

    /// Adds a chunk buffer scaled by `scale`.
    pub fn absorb(&mut self, buf: &GradientBuffer, scale: f64) {
        for (d, s) in self.mlp.iter_mut().zip(&buf.mlp) {
            for (a, b) in d.iter_mut().zip(s) {
                *a += scale * b;
            }
        }
        let f = buf.feature_dim;
        for (n, &(level, slot)) in buf.feature_index.iter().enumerate() {
            let dst = &mut self.features[level as usize][slot as usize * f..(slot as usize + 1) * f];
            for (a, b) in dst.iter_mut().zip(&buf.feature_values[n * f..(n + 1) * f]) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.mlp.iter_mut().chain(self.features.iter_mut()).for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }

    pub fn add(&mut self, other: &DenseGradients) {
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp).chain(self.features.iter_mut().zip(&other.features)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.mlp.iter().chain(self.features.iter()).flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// The learnable map: octree features plus one decoder per trainable level.
#[derive(Debug, Clone)]
pub struct NeuralMap {
    pub octree: FeatureOctree,
    pub mlps: Vec<LevelMlp>,
}

impl NeuralMap {
    pub fn new(config: OctreeConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d6c_7073);
        let octree = FeatureOctree::new(config)?;
        let in_dim = LevelMlp::input_dim_for(octree.feature_dim());
        // The coarsest level is trained alone first; finer ones join later
        // and start silent so they do not disturb what is already fitted.
        let mlps = (0..octree.level_count()).map(|l| LevelMlp::decoder(in_dim, l > 0, &mut rng)).collect();
        Ok(Self { octree, mlps })
    }

    /// A map whose decoders and features are all zero.
    pub fn zeroed(config: OctreeConfig) -> Result<Self> {
        let octree = FeatureOctree::new(config)?;
        let in_dim = LevelMlp::input_dim_for(octree.feature_dim());
        let mlps = (0..octree.level_count()).map(|_| LevelMlp::zeros(in_dim)).collect();
        Ok(Self { octree, mlps })
    }

    pub fn level_count(&self) -> usize {
        self.mlps.len()
    }

    pub fn all_levels(&self) -> LevelMask {
        LevelMask::coarsest(self.level_count())
    }

    pub fn fine_voxel_size(&self) -> f64 {
        self.octree.level(self.octree.fine_level()).spec().voxel_size
    }

    fn level_input(&self, grid: &LevelGrid, bundle: &CornerBundle) -> Vec<f64> {
        let f = grid.spec().feature_dim;
        let mut input = vec![0.0; 8 * f + 3];
        bundle.weighted_features_into(grid, &mut input[..8 * f]);
        input[8 * f..].copy_from_slice(bundle.local.as_slice());
        input
    }

    /// One level's contribution at `x` for a given corner bundle.
    pub fn level_forward(&self, level: usize, bundle: &CornerBundle) -> LevelTape {
        let grid = self.octree.level(level);
        let input = self.level_input(grid, bundle);
        LevelTape { bundle: *bundle, mlp: self.mlps[level].forward(input) }
    }

    /// Sum of the active levels' outputs at `x`. Active levels whose voxel
    /// is unallocated contribute zero and are left out of `observed`.
    pub fn predict(&self, x: &Vector3<f64>, active: LevelMask) -> FieldEval {
        let n = self.level_count();
        let mut tapes = Vec::with_capacity(n);
        let mut value = 0.0;
        let mut observed = LevelMask::NONE;
        for level in 0..n {
            if !active.contains(level) {
                tapes.push(None);
                continue;
            }
            match self.octree.interpolate(level, x) {
                Ok(bundle) => {
                    let tape = self.level_forward(level, &bundle);
                    value += tape.mlp.output;
                    observed = observed.with(level);
                    tapes.push(Some(tape));
                }
                Err(_) => tapes.push(None),
            }
        }
        FieldEval { value, tapes, active, observed }
    }

    /// Field value if every active level is observed at `x`.
    pub fn value(&self, x: &Vector3<f64>, active: LevelMask) -> Option<f64> {
        let e = self.predict(x, active);
        e.fully_observed().then_some(e.value)
    }

    /// Reverse pass of [`predict`](Self::predict) for `dL/dvalue = upstream`.
    /// Parameter gradients go to `grads` when given; returns `dL/dx`.
    pub fn backward(&self, eval: &FieldEval, upstream: f64, mut grads: Option<&mut GradientBuffer>) -> Vector3<f64> {
        let mut coord = Vector3::zeros();
        let f = self.octree.feature_dim();
        let mut input_grad = vec![0.0; 8 * f + 3];
        for (level, tape) in eval.tapes.iter().enumerate() {
            let Some(tape) = tape else { continue };
            let mlp = &self.mlps[level];
            let grid = self.octree.level(level);
            mlp.backward(&tape.mlp, upstream, grads.as_deref_mut().map(|g| g.mlp[level].as_mut_slice()), &mut input_grad);
            let (feature_grads, dx_weights) = tape.bundle.interpolate_gradients(grid, &input_grad[..8 * f]);
            let dx_local = Vector3::new(input_grad[8 * f], input_grad[8 * f + 1], input_grad[8 * f + 2]);
            coord += dx_weights + dx_local / tape.bundle.voxel_size;
            if let Some(g) = grads.as_deref_mut() {
                for j in 0..8 {
                    g.feature_index.push((level as u32, tape.bundle.slots[j]));
                    g.feature_values.extend_from_slice(&feature_grads[j * f..(j + 1) * f]);
                }
            }
        }
        coord
    }

    /// Flat copies of every parameter, decoders first then features.
    pub fn parameter_checksum(&self) -> u64 {
        use std::hash::{DefaultHasher, Hasher};
        let mut h = DefaultHasher::new();
        for m in &self.mlps {
            for v in m.params() {
                h.write_u64(v.to_bits());
            }
        }
        for l in self.octree.levels() {
            for k in l.corner_keys() {
                h.write_u64(*k);
            }
            for v in l.features() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.mlps.iter().all(|m| m.is_finite())
            && self.octree.levels().iter().all(|l| l.features().iter().all(|v| v.is_finite()))
    }
}
