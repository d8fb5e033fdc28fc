#![allow(dead_code)]

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use octoslam::network::GradientBuffer;
use octoslam::pose::pose_objective;
use octoslam::sampling::{BeamSample, RangeClass, SampleKind};
use octoslam::{LevelMlp, NeuralMap, OctreeConfig, Pose, Twist};

pub const STEP: f64 = 1e-6;
pub const FEATURE_STEP: f64 = 1e-4;

/// Denominator floor. Central differences of an O(1) output at step 1e-6
/// carry about 1e-10 of rounding noise, so components smaller than this
/// are effectively compared in absolute terms.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CheckStats {
    pub cases: usize,
    pub comparisons: usize,
    pub worst: f64,
}

impl CheckStats {
    fn record(&mut self, e: f64) {
        self.comparisons += 1;
        self.worst = self.worst.max(e);
    }
}

/// Three-level map with allocated voxels around the origin, random
/// features and fully random decoders, so every gradient path is live.
pub fn textured_map(seed: u64) -> NeuralMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = NeuralMap::new(OctreeConfig {
        min_corner: Vector3::new(-3.2, -3.2, -3.2),
        finest_level: 6,
        fine_voxel_size: 0.1,
        seed,
        ..OctreeConfig::default()
    })
    .unwrap();
    let pts: Vec<Vector3<f64>> = (0..400).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
    map.octree.allocate_for_points(&pts);
    for l in 0..map.level_count() {
        for v in map.octree.level_mut(l).features_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let in_dim = LevelMlp::input_dim_for(map.octree.feature_dim());
    for m in map.mlps.iter_mut() {
        *m = LevelMlp::random(in_dim, &mut rng);
    }
    map
}

/// Fully observed point at least `margin` (in local units) from every
/// voxel face, so small displacements keep the same corner set.
pub fn interior_point(map: &NeuralMap, rng: &mut impl Rng, margin: f64) -> Vector3<f64> {
    loop {
        let x = Vector3::from_fn(|_, _| rng.random_range(-0.9..0.9));
        if clear_of_faces(map, &x, margin) {
            return x;
        }
    }
}

pub fn clear_of_faces(map: &NeuralMap, x: &Vector3<f64>, margin: f64) -> bool {
    (0..map.level_count()).all(|l| match map.octree.interpolate(l, x) {
        Ok(b) => b.local.iter().all(|u| *u > margin && *u < 1.0 - margin),
        Err(_) => false,
    })
}

/// Decoder parameters against central differences of the decoder output.
pub fn check_mlp_params(cases: usize, per_case: usize, seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = CheckStats::default();
    for _ in 0..cases {
        let in_dim = LevelMlp::input_dim_for(rng.random_range(1..5));
        let mlp = LevelMlp::random(in_dim, &mut rng);
        let input: Vec<f64> = (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = mlp.forward(input.clone());
        let mut grad = vec![0.0; mlp.params().len()];
        let mut input_grad = vec![0.0; in_dim];
        mlp.backward(&tape, 1.0, Some(&mut grad), &mut input_grad);
        let mut probe = |k: usize, analytic: f64| {
            let h = STEP * mlp.params()[k].abs().max(1.0);
            let mut m = mlp.clone();
            m.params_mut()[k] += h;
            let up = m.forward(input.clone()).output;
            m.params_mut()[k] -= 2.0 * h;
            let down = m.forward(input.clone()).output;
            stats.record(rel_err(analytic, (up - down) / (2.0 * h)));
        };
        probe(mlp.output_bias_index(), grad[mlp.output_bias_index()]);
        for _ in 0..per_case {
            let k = rng.random_range(0..mlp.params().len());
            probe(k, grad[k]);
        }
        stats.cases += 1;
    }
    stats
}

/// Corner features against central differences of the summed field.
pub fn check_features(cases: usize, seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = CheckStats::default();
    let mut map = textured_map(seed);
    let all = map.all_levels();
    let f = map.octree.feature_dim();
    for _ in 0..cases {
        let x = interior_point(&map, &mut rng, 1e-3);
        let eval = map.predict(&x, all);
        let mut buf = GradientBuffer::new(&map);
        map.backward(&eval, 1.0, Some(&mut buf));
        let entries = buf.feature_index.len();
        for _ in 0..4 {
            let e = rng.random_range(0..entries);
            let (level, slot) = buf.feature_index[e];
            let c = rng.random_range(0..f);
            // A slot can appear once per level per query; sum duplicates.
            let analytic: f64 = buf
                .feature_index
                .iter()
                .enumerate()
                .filter(|(_, k)| **k == (level, slot))
                .map(|(j, _)| buf.feature_values[j * f + c])
                .sum();
            let idx = slot as usize * f + c;
            let orig = map.octree.level(level as usize).features()[idx];
            // The field is nearly linear in one feature, and gradients are
            // small against the output, so a wider step beats rounding.
            let h = FEATURE_STEP * orig.abs().max(1.0);
            map.octree.level_mut(level as usize).features_mut()[idx] = orig + h;
            let up = map.predict(&x, all).value;
            map.octree.level_mut(level as usize).features_mut()[idx] = orig - h;
            let down = map.predict(&x, all).value;
            map.octree.level_mut(level as usize).features_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            stats.record(rel_err(analytic, fd));
        }
        stats.cases += 1;
    }
    stats
}

/// Query coordinate against central differences of the summed field.
pub fn check_coordinate(cases: usize, seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = CheckStats::default();
    let map = textured_map(seed);
    let all = map.all_levels();
    for _ in 0..cases {
        let x = interior_point(&map, &mut rng, 1e-3);
        let g = map.backward(&map.predict(&x, all), 1.0, None);
        for k in 0..3 {
            let h = STEP * x[k].abs().max(1.0);
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let fd = (map.predict(&xp, all).value - map.predict(&xm, all).value) / (2.0 * h);
            stats.record(rel_err(g[k], fd));
        }
        stats.cases += 1;
    }
    stats
}

/// Twist gradient of the registration loss against central differences
/// of `T <- exp(delta) * T`.
pub fn check_twist(cases: usize, seed: u64) -> CheckStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = CheckStats::default();
    let map = textured_map(seed);
    let all = map.all_levels();
    while stats.cases < cases {
        let pose = Twist::new(
            Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2)),
            Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
        )
        .exp()
        .unwrap();
        let inv = pose.inverse();
        let samples: Vec<BeamSample> = (0..24)
            .map(|i| {
                let world = interior_point(&map, &mut rng, 1e-3);
                BeamSample {
                    local: inv.transform_point(&world),
                    label: rng.random_range(-0.15..0.15),
                    weight: rng.random_range(0.5..1.0),
                    range_class: RangeClass::Close,
                    kind: SampleKind::Surface,
                    beam: i,
                }
            })
            .collect();
        let e = pose_objective(&samples, &pose, &map, all, 0.0).unwrap();
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = STEP;
            let at = |d: Vector6<f64>| -> f64 {
                let p: Pose = Twist::from_vector(&d).exp().unwrap().compose(&pose);
                pose_objective(&samples, &p, &map, all, 0.0).unwrap().loss
            };
            let fd = (at(d) - at(-d)) / (2.0 * STEP);
            stats.record(rel_err(e.grad[k], fd));
        }
        stats.cases += 1;
    }
    stats
}
