//! Per-scan map training.
//!
//! Objective per iteration: weighted mean squared SDF error over a minibatch
//! plus, per level `k`, the importance-weighted drift penalty
//! `gamma_k * sum Omega * (w - w_prev)^2`. Levels are switched on coarse to
//! fine at equal iteration intervals within every scan.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{DenseGradients, GradientBuffer, LevelMask, NeuralMap};
use crate::sampling::{RangeClass, SdfSample};

const CHUNK: usize = 256;

/// Active levels at `iter` when `total` iterations are split into
/// `n_levels` equal intervals; the last interval absorbs the remainder.
pub fn level_schedule(iter: usize, total: usize, n_levels: usize) -> Result<LevelMask> {
    if n_levels == 0 || n_levels > total {
        return Err(Error::InvalidArgument(format!(
            "cannot schedule {n_levels} levels over {total} iterations"
        )));
    }
    if iter >= total {
        return Err(Error::InvalidArgument(format!("iteration {iter} out of range 0..{total}")));
    }
    let interval = total / n_levels;
    Ok(LevelMask::coarsest((iter / interval + 1).min(n_levels)))
}

/// Active levels at `iter` for explicit segment lengths: segment `s`
/// activates the `s + 1` coarsest levels.
pub fn segment_schedule(iter: usize, segments: &[usize], n_levels: usize) -> Result<LevelMask> {
    let mut end = 0;
    for (s, &len) in segments.iter().enumerate() {
        end += len;
        if iter < end {
            return Ok(LevelMask::coarsest((s + 1).min(n_levels)));
        }
    }
    Err(Error::InvalidArgument(format!("iteration {iter} beyond schedule of {end}")))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected first/second moment optimizer over one flat buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self { cfg, m: vec![0.0; len], v: vec![0.0; len], steps: 0 }
    }

    /// One step on `params` with per-entry learning rates from `lr(i)`.
    pub fn step_with(&mut self, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        self.steps += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.steps);
        let c2 = 1.0 - self.cfg.beta2.powi(self.steps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g;
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr(i) * mh / (vh.sqrt() + self.cfg.eps);
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step_with(params, grad, |_| lr)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub map_iters: usize,
    pub batch_size: usize,
    pub lr_features: f64,
    pub lr_mlp: f64,
    /// Drift penalty weight per level, coarsest first.
    pub gammas: Vec<f64>,
    pub adam: AdamConfig,
    /// Apply the drift penalty from the second scan on.
    pub regularize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            map_iters: 50,
            batch_size: 4096,
            lr_features: 1e-2,
            lr_mlp: 1e-3,
            gammas: vec![1e-2, 1e-3, 1e-4],
            adam: AdamConfig::default(),
            regularize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_levels: usize) -> Result<()> {
        if self.gammas.len() != n_levels {
            return Err(Error::Config(format!("{} gammas for {n_levels} levels", self.gammas.len())));
        }
        if self.gammas.windows(2).any(|w| w[1] > w[0]) || self.gammas.iter().any(|g| *g < 0.0) {
            return Err(Error::Config("gammas must be non-negative and non-increasing toward finer levels".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.map_iters > 0 && n_levels > self.map_iters {
            return Err(Error::Config(format!("{n_levels} levels need at least as many mapping iterations")));
        }
        Ok(())
    }
}

/// Parameters at the end of the previous scan and their importance.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerState {
    pub snapshot: DenseGradients,
    pub omega: DenseGradients,
}

impl RegularizerState {
    /// Snapshot of the current parameters with zero importance.
    pub fn capture(map: &NeuralMap) -> Self {
        let snapshot = DenseGradients {
            mlp: map.mlps.iter().map(|m| m.params().to_vec()).collect(),
            features: map.octree.levels().iter().map(|l| l.features().to_vec()).collect(),
        };
        let omega = DenseGradients {
            mlp: snapshot.mlp.iter().map(|v| vec![0.0; v.len()]).collect(),
            features: snapshot.features.iter().map(|v| vec![0.0; v.len()]).collect(),
        };
        Self { snapshot, omega }
    }

    /// Extends the snapshot to corners allocated since it was taken. New
    /// corners get zero importance.
    pub fn sync_shapes(&mut self, map: &NeuralMap) -> Result<()> {
        for (level, grid) in map.octree.levels().iter().enumerate() {
            let live = grid.features();
            let snap = &mut self.snapshot.features[level];
            if snap.len() > live.len() {
                return Err(Error::ShapeMismatch(format!(
                    "level {level}: snapshot has {} features, model {}",
                    snap.len(),
                    live.len()
                )));
            }
            snap.extend_from_slice(&live[snap.len()..]);
            self.omega.features[level].resize(live.len(), 0.0);
        }
        for (level, mlp) in map.mlps.iter().enumerate() {
            if self.snapshot.mlp[level].len() != mlp.params().len() {
                return Err(Error::ShapeMismatch(format!("level {level} decoder size changed")));
            }
        }
        Ok(())
    }

    fn check_shapes(&self, map: &NeuralMap) -> Result<()> {
        let ok = self.snapshot.mlp.len() == map.mlps.len()
            && self.snapshot.features.len() == map.octree.level_count()
            && map.mlps.iter().zip(&self.snapshot.mlp).all(|(m, s)| m.params().len() == s.len())
            && map.octree.levels().iter().zip(&self.snapshot.features).all(|(l, s)| l.features().len() == s.len())
            && self.omega.mlp.iter().zip(&self.snapshot.mlp).all(|(a, b)| a.len() == b.len())
            && self.omega.features.iter().zip(&self.snapshot.features).all(|(a, b)| a.len() == b.len());
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("regularizer state does not mirror the model".into()))
        }
    }
}

/// `sum_k gamma_k sum_p Omega_p (w_p - w_prev_p)^2` and its gradient.
pub fn reg_loss(state: &RegularizerState, map: &NeuralMap, gammas: &[f64]) -> Result<(f64, DenseGradients)> {
    state.check_shapes(map)?;
    if gammas.len() != map.level_count() {
        return Err(Error::ShapeMismatch(format!("{} gammas for {} levels", gammas.len(), map.level_count())));
    }
    let mut grads = DenseGradients::zeros(map);
    let mut loss = 0.0;
    let mut penalize = |live: &[f64], prev: &[f64], omega: &[f64], gamma: f64, out: &mut [f64]| {
        let mut acc = 0.0;
        for i in 0..live.len() {
            let d = live[i] - prev[i];
            acc += omega[i] * d * d;
            out[i] = 2.0 * gamma * omega[i] * d;
        }
        loss += gamma * acc;
    };
    for (level, &gamma) in gammas.iter().enumerate() {
        penalize(
            map.mlps[level].params(),
            &state.snapshot.mlp[level],
            &state.omega.mlp[level],
            gamma,
            &mut grads.mlp[level],
        );
        penalize(
            map.octree.level(level).features(),
            &state.snapshot.features[level],
            &state.omega.features[level],
            gamma,
            &mut grads.features[level],
        );
    }
    Ok((loss, grads))
}

/// Loss and gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// `(1/N) sum w (y - y_hat)^2` over supervised samples.
    pub loss: f64,
    /// Gradient of `loss`.
    pub grads: DenseGradients,
    /// Gradient of the unnormalized squared error of far-range samples.
    pub far_grads: DenseGradients,
    pub supervised: usize,
}

struct ChunkResult {
    sq_err: f64,
    supervised: usize,
    close: GradientBuffer,
    far: GradientBuffer,
}

fn eval_chunk(map: &NeuralMap, samples: &[&SdfSample], mask: LevelMask) -> ChunkResult {
    let mut close = GradientBuffer::new(map);
    let mut far = GradientBuffer::new(map);
    let mut sq_err = 0.0;
    let mut supervised = 0;
    for s in samples {
        let eval = map.predict(&s.x, mask);
        if !eval.any_observed() {
            continue;
        }
        supervised += 1;
        let r = s.label - eval.value;
        sq_err += s.weight * r * r;
        let buf = if s.range_class == RangeClass::Far { &mut far } else { &mut close };
        map.backward(&eval, -2.0 * s.weight * r, Some(buf));
    }
    ChunkResult { sq_err, supervised, close, far }
}

/// Weighted mean squared error of a batch under `mask`, with gradients.
/// Samples unobserved at every active level are ignored.
pub fn map_loss(samples: &[&SdfSample], map: &NeuralMap, mask: LevelMask) -> Result<BatchLoss> {
    if samples.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let chunks: Vec<ChunkResult> = samples.par_chunks(CHUNK).map(|c| eval_chunk(map, c, mask)).collect();
    let supervised: usize = chunks.iter().map(|c| c.supervised).sum();
    if supervised == 0 {
        return Err(Error::NoSupervision);
    }
    let inv = 1.0 / supervised as f64;
    let mut grads = DenseGradients::zeros(map);
    let mut far_grads = DenseGradients::zeros(map);
    let mut sq = 0.0;
    for c in &chunks {
        sq += c.sq_err;
        grads.absorb(&c.close, inv);
        grads.absorb(&c.far, inv);
        far_grads.absorb(&c.far, 1.0);
    }
    Ok(BatchLoss { loss: sq * inv, grads, far_grads, supervised })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub map_loss: f64,
    pub reg_loss: f64,
    pub active_levels: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    /// Samples with an allocated voxel at some level.
    pub usable_samples: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.map_loss)
    }

    /// `iter,L_map,L_reg,active_levels` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,map_loss,reg_loss,active_levels\n");
        for r in &self.trace {
            s.push_str(&format!("{},{:e},{:e},{}\n", r.iter, r.map_loss, r.reg_loss, r.active_levels));
        }
        s
    }
}

struct ParamBackup {
    mlp: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
}

impl ParamBackup {
    fn take(map: &NeuralMap) -> Self {
        Self {
            mlp: map.mlps.iter().map(|m| m.params().to_vec()).collect(),
            features: map.octree.levels().iter().map(|l| l.features().to_vec()).collect(),
        }
    }

    fn restore(self, map: &mut NeuralMap) {
        for (m, p) in map.mlps.iter_mut().zip(self.mlp) {
            m.params_mut().copy_from_slice(&p);
        }
        for (l, f) in self.features.into_iter().enumerate() {
            map.octree.level_mut(l).features_mut().copy_from_slice(&f);
        }
    }
}

/// Trains the map on one scan's samples (measured and replay). The octree
/// must already be allocated around them. On return `reg` holds the new
/// snapshot and accumulated importance.
pub fn train_scan(
    samples: &[SdfSample],
    map: &mut NeuralMap,
    cfg: &TrainConfig,
    reg: &mut Option<RegularizerState>,
    seed: u64,
) -> Result<TrainReport> {
    let n_levels = map.level_count();
    cfg.validate(n_levels)?;
    let mut report = TrainReport::default();
    if cfg.map_iters == 0 {
        return Ok(report);
    }
    let all = map.all_levels();
    let usable: Vec<&SdfSample> = samples.iter().filter(|s| map.predict(&s.x, all).any_observed()).collect();
    report.usable_samples = usable.len();
    if usable.is_empty() {
        return Err(Error::NoSupervision);
    }
    if let Some(state) = reg.as_mut() {
        state.sync_shapes(map)?;
    }
    let penalize = cfg.regularize && reg.is_some() && cfg.gammas.iter().any(|&g| g > 0.0);

    let backup = ParamBackup::take(map);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam_mlp: Vec<Adam> = map.mlps.iter().map(|m| Adam::new(m.params().len(), cfg.adam)).collect();
    let mut adam_feat: Vec<Adam> =
        map.octree.levels().iter().map(|l| Adam::new(l.features().len(), cfg.adam)).collect();
    let mut omega_scan: Option<DenseGradients> = None;

    for iter in 0..cfg.map_iters {
        let mask = level_schedule(iter, cfg.map_iters, n_levels)?;
        let batch: Vec<&SdfSample> = if usable.len() <= cfg.batch_size {
            usable.clone()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, usable.len(), cfg.batch_size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| usable[i]).collect()
        };
        let mut batch_loss = match map_loss(&batch, map, mask) {
            Ok(b) => b,
            Err(Error::NoSupervision) => continue,
            Err(e) => return Err(e),
        };
        let mut reg_value = 0.0;
        if penalize {
            let (l, g) = reg_loss(reg.as_ref().expect("checked"), map, &cfg.gammas)?;
            reg_value = l;
            batch_loss.grads.add(&g);
        }
        if !(batch_loss.loss.is_finite() && reg_value.is_finite()) {
            backup.restore(map);
            return Err(Error::Diverged(format!("non-finite loss at iteration {iter}")));
        }
        for level in (0..n_levels).filter(|&l| mask.contains(l)) {
            adam_mlp[level].step(map.mlps[level].params_mut(), &batch_loss.grads.mlp[level], cfg.lr_mlp);
            adam_feat[level].step(
                map.octree.level_mut(level).features_mut(),
                &batch_loss.grads.features[level],
                cfg.lr_features,
            );
        }
        match omega_scan.as_mut() {
            Some(o) => {
                for (a, b) in o.mlp.iter_mut().zip(&batch_loss.far_grads.mlp).chain(
                    o.features.iter_mut().zip(&batch_loss.far_grads.features),
                ) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y.abs());
                }
            }
            None => {
                let mut o = batch_loss.far_grads;
                o.mlp.iter_mut().chain(o.features.iter_mut()).for_each(|v| v.iter_mut().for_each(|x| *x = x.abs()));
                omega_scan = Some(o);
            }
        }
        report.trace.push(TraceRow { iter, map_loss: batch_loss.loss, reg_loss: reg_value, active_levels: mask.count() });
    }
    if !map.is_finite() {
        backup.restore(map);
        return Err(Error::Diverged("non-finite parameters after update".into()));
    }

    let mut next = RegularizerState::capture(map);
    if let Some(prev) = reg.as_ref() {
        next.omega = prev.omega.clone();
    }
    if let Some(o) = omega_scan {
        next.omega.add(&o);
    }
    *reg = Some(next);
    Ok(report)
}
