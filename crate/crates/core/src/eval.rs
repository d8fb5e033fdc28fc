//! Trajectory and reconstruction metrics.

use std::fmt;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::pipeline::Trajectory;
use crate::se3::Pose;

/// Distances above this are clamped before averaging.
pub const DEFAULT_CAP: f64 = 2.0;
/// Mesh surface samples per square metre for mesh-to-cloud metrics.
pub const DEFAULT_SAMPLE_DENSITY: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub percent: f64,
    /// Transform applied to the estimate before comparison.
    pub alignment: Pose,
    pub pairs: usize,
}

/// Least-squares rigid transform taking `src` onto `dst` (no scale).
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", src.len(), dst.len())));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - ms) * (d - md).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = vt.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v * fix * u.transpose();
    Pose::from_parts(r, md - r * ms)
}

/// Absolute trajectory error over the indices present in both trajectories.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<AteResult> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut gt_matched = Vec::new();
    for (i, p) in est.entries() {
        if let Some(g) = gt.get(*i) {
            src.push(*p.translation());
            dst.push(*g.translation());
            gt_matched.push((*i, *g));
        }
    }
    if src.len() < 3 {
        return Err(Error::InvalidArgument(format!("ATE needs at least 3 matched poses, got {}", src.len())));
    }
    let alignment = align_rigid(&src, &dst)?;
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (alignment.transform_point(s) - d).norm_squared()).sum();
    let rmse = (sq / src.len() as f64).sqrt();
    let length = Trajectory::from_entries(gt_matched)?.path_length();
    let percent = if length > 0.0 {
        100.0 * rmse / length
    } else if rmse == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(AteResult { rmse, percent, alignment, pairs: src.len() })
}

fn as_array(p: &Vector3<f64>) -> [f64; 3] {
    [p.x, p.y, p.z]
}

/// Distance from every query to its nearest reference point.
pub fn nearest_distances(queries: &[Vector3<f64>], refs: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if refs.is_empty() {
        return Err(Error::Empty("reference point set".into()));
    }
    let pts: Vec<[f64; 3]> = refs.iter().map(as_array).collect();
    let tree: ImmutableKdTree<f64, u64, 3, 32> = ImmutableKdTree::new_from_slice(&pts);
    Ok(queries.par_iter().map(|q| tree.nearest_one::<SquaredEuclidean>(&as_array(q)).distance.sqrt()).collect())
}

/// Exhaustive counterpart of [`nearest_distances`].
pub fn nearest_distances_brute(queries: &[Vector3<f64>], refs: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if refs.is_empty() {
        return Err(Error::Empty("reference point set".into()));
    }
    Ok(queries
        .iter()
        .map(|q| {
            refs.iter()
                .map(|r| {
                    let d = [q.x - r.x, q.y - r.y, q.z - r.z];
                    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapMetrics {
    pub accuracy: f64,
    pub completeness: f64,
    pub chamfer_l1: f64,
    pub chamfer_l2: f64,
}

/// Combines one-sided distances: prediction-to-truth gives accuracy,
/// truth-to-prediction gives completeness.
pub fn chamfer_from_distances(pred_to_gt: &[f64], gt_to_pred: &[f64], cap: f64) -> Result<MapMetrics> {
    if pred_to_gt.is_empty() || gt_to_pred.is_empty() {
        return Err(Error::Empty("distance set".into()));
    }
    let stats = |d: &[f64]| {
        let n = d.len() as f64;
        let (s, s2) = d.iter().map(|v| v.min(cap)).fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
        (s / n, s2 / n)
    };
    let (acc, acc2) = stats(pred_to_gt);
    let (comp, comp2) = stats(gt_to_pred);
    Ok(MapMetrics {
        accuracy: acc,
        completeness: comp,
        chamfer_l1: 0.5 * (acc + comp),
        chamfer_l2: (0.5 * (acc2 + comp2)).sqrt(),
    })
}

pub fn map_metrics(pred: &[Vector3<f64>], gt: &[Vector3<f64>], cap: f64) -> Result<MapMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("point set for map metrics".into()));
    }
    chamfer_from_distances(&nearest_distances(pred, gt)?, &nearest_distances(gt, pred)?, cap)
}

/// Samples the mesh surface at `density` points/m^2 and compares to `gt`.
pub fn mesh_metrics(mesh: &TriangleMesh, gt: &[Vector3<f64>], density: f64, cap: f64, seed: u64) -> Result<MapMetrics> {
    if mesh.is_empty() {
        return Err(Error::Empty("mesh".into()));
    }
    map_metrics(&mesh.sample_surface(density, seed), gt, cap)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricReport {
    pub ate_m: Option<f64>,
    pub ate_pct: Option<f64>,
    pub accuracy_m: Option<f64>,
    pub completeness_m: Option<f64>,
    pub chamfer_l1_m: Option<f64>,
    pub chamfer_l2_m: Option<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "ate_m,ate_pct,accuracy_m,completeness_m,chamfer_l1_m,chamfer_l2_m";

    pub fn from_ate(a: &AteResult) -> Self {
        Self { ate_m: Some(a.rmse), ate_pct: Some(a.percent), ..Self::default() }
    }

    pub fn from_map(m: &MapMetrics) -> Self {
        Self {
            accuracy_m: Some(m.accuracy),
            completeness_m: Some(m.completeness),
            chamfer_l1_m: Some(m.chamfer_l1),
            chamfer_l2_m: Some(m.chamfer_l2),
            ..Self::default()
        }
    }

    fn fields(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("ATE [m]", self.ate_m),
            ("ATE [%]", self.ate_pct),
            ("Acc. [m]", self.accuracy_m),
            ("Comp. [m]", self.completeness_m),
            ("C-L1 [m]", self.chamfer_l1_m),
            ("C-L2 [m]", self.chamfer_l2_m),
        ]
    }

    /// Missing values are left empty.
    pub fn csv_row(&self) -> String {
        self.fields().iter().map(|(_, v)| v.map(|v| format!("{v:.6}")).unwrap_or_default()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in self.fields() {
            if let Some(v) = v {
                writeln!(f, "{name:<10} {v:>10.4}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Twist;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Trajectory {
        Trajectory::from_poses((0..n).map(|i| Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0))))
    }

    #[test]
    fn identical_trajectories() {
        let gt = line(10);
        let r = ate(&gt, &gt).unwrap();
        assert_eq!(r.pairs, 10);
        assert!(r.rmse < 1e-12);
        assert!(r.percent < 1e-12);
    }

    #[test]
    fn too_few_pairs() {
        assert!(ate(&line(2), &line(2)).is_err());
        let est = Trajectory::from_entries(vec![(20, Pose::identity()), (21, Pose::identity()), (22, Pose::identity())]).unwrap();
        assert!(ate(&est, &line(10)).is_err());
    }

    #[test]
    fn single_lateral_offset_matches_planar_closed_form() {
        let gt = line(10);
        for k in [0usize, 3, 9] {
            let est = Trajectory::from_poses((0..10).map(|i| {
                let y = if i == k { 0.9 } else { 0.0 };
                Pose::from_translation(Vector3::new(i as f64, y, 0.0))
            }));
            // Planar Procrustes: rotation angle from summed cross and dot
            // products of the centred point sets.
            let q: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 - 4.5, if i == k { 0.81 } else { -0.09 })).collect();
            let p: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
            let cross: f64 = q.iter().zip(&p).map(|((_, qy), px)| -qy * px).sum();
            let dot: f64 = q.iter().zip(&p).map(|((qx, _), px)| qx * px).sum();
            let th = cross.atan2(dot);
            let mut sq = 0.0;
            for (i, (qx, qy)) in q.iter().enumerate() {
                let rx = th.cos() * qx - th.sin() * qy - p[i];
                let ry = th.sin() * qx + th.cos() * qy;
                sq += rx * rx + ry * ry;
            }
            let expect = (sq / 10.0).sqrt();
            let r = ate(&est, &gt).unwrap();
            assert!((r.rmse - expect).abs() < 1e-9, "k={k}: {} vs {expect}", r.rmse);
            assert!((r.percent - 100.0 * expect / 9.0).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ate_ignores_rigid_pretransform(
            seed in any::<u64>(),
            rho in prop::array::uniform3(-50.0f64..50.0),
            phi in prop::array::uniform3(-3.0f64..3.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = Trajectory::from_poses((0..12).map(|_| {
                Pose::from_translation(Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
            }));
            let noisy = Trajectory::from_poses(gt.poses().map(|p| {
                Pose::from_translation(p.translation() + Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)))
            }));
            let t = Twist::new(Vector3::from(rho), Vector3::from(phi)).exp().unwrap();
            let moved = Trajectory::from_poses(noisy.poses().map(|p| t.compose(p)));
            let a = ate(&noisy, &gt).unwrap();
            let b = ate(&moved, &gt).unwrap();
            prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
            let c = ate(&Trajectory::from_poses(gt.poses().map(|p| t.compose(p))), &gt).unwrap();
            prop_assert!(c.rmse < 1e-9);
        }
    }

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn metric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(100, &mut rng);
        let m = map_metrics(&a, &a, DEFAULT_CAP).unwrap();
        assert_eq!((m.accuracy, m.completeness, m.chamfer_l1, m.chamfer_l2), (0.0, 0.0, 0.0, 0.0));
        let p = [Vector3::zeros()];
        let q = [Vector3::new(0.0, 0.4, 0.0)];
        let m = map_metrics(&p, &q, DEFAULT_CAP).unwrap();
        for v in [m.accuracy, m.completeness, m.chamfer_l1, m.chamfer_l2] {
            assert!((v - 0.4).abs() < 1e-15);
        }
        assert!(map_metrics(&[], &q, DEFAULT_CAP).is_err());
        let far = [Vector3::new(10.0, 0.0, 0.0)];
        assert_eq!(map_metrics(&p, &far, DEFAULT_CAP).unwrap().accuracy, DEFAULT_CAP);
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(1..300);
            let a = cloud(n, &mut rng);
            let b = cloud(200, &mut rng);
            let fast = nearest_distances(&b, &a).unwrap();
            let slow = nearest_distances_brute(&b, &a).unwrap();
            for (x, y) in fast.iter().zip(&slow) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn swapping_inputs_swaps_one_sided_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud(150, &mut rng);
        let b: Vec<_> = cloud(90, &mut rng).into_iter().map(|p| p * 1.3).collect();
        let m = map_metrics(&a, &b, DEFAULT_CAP).unwrap();
        let n = map_metrics(&b, &a, DEFAULT_CAP).unwrap();
        assert_eq!(m.accuracy, n.completeness);
        assert_eq!(m.completeness, n.accuracy);
        assert_eq!(m.chamfer_l1, n.chamfer_l1);
        assert_eq!(m.chamfer_l2, n.chamfer_l2);
        assert!(m.chamfer_l1 <= m.accuracy.max(m.completeness) + m.accuracy.min(m.completeness));
    }

    #[test]
    fn report_formats() {
        let r = MetricReport { ate_m: Some(0.0), ate_pct: Some(0.0), ..MetricReport::default() };
        assert_eq!(r.csv_row(), "0.000000,0.000000,,,,");
        assert!(r.to_string().contains("ATE [m]"));
        assert!(!r.to_string().contains("C-L1"));
    }
}
