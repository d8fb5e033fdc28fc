//! Analytic test scenes and a sphere-tracing LiDAR simulator.

use std::fmt;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sampling::{mix_seed, LidarScan};
use crate::se3::Pose;

pub const TRACE_STEPS: usize = 128;
pub const TRACE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Half-space below the plane through `point` with outward `normal`.
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Solid axis-aligned box.
    Box { center: Vector3<f64>, half: Vector3<f64> },
    /// Hollow axis-aligned box: free inside, solid outside.
    Room { center: Vector3<f64>, half: Vector3<f64> },
}

fn box_sdf(p: &Vector3<f64>, center: &Vector3<f64>, half: &Vector3<f64>) -> f64 {
    let q = (p - center).abs() - half;
    let outside = q.map(|v| v.max(0.0)).norm();
    outside + q.max().min(0.0)
}

impl Primitive {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Plane { point, normal } => (p - point).dot(normal),
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Box { center, half } => box_sdf(p, center, half),
            Primitive::Room { center, half } => -box_sdf(p, center, half),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Plane { point, normal } => point.iter().all(|v| v.is_finite()) && normal.norm() > 0.0,
            Primitive::Sphere { center, radius } => center.iter().all(|v| v.is_finite()) && *radius > 0.0,
            Primitive::Box { center, half } | Primitive::Room { center, half } => {
                center.iter().all(|v| v.is_finite()) && half.iter().all(|v| *v > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate primitive {self:?}")))
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = |v: &Vector3<f64>| format!("{} {} {}", v.x, v.y, v.z);
        match self {
            Primitive::Plane { point, normal } => write!(f, "plane {} {}", v(point), v(normal)),
            Primitive::Sphere { center, radius } => write!(f, "sphere {} {radius}", v(center)),
            Primitive::Box { center, half } => write!(f, "box {} {}", v(center), v(half)),
            Primitive::Room { center, half } => write!(f, "room {} {}", v(center), v(half)),
        }
    }
}

/// Union of primitives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        for p in &primitives {
            p.validate()?;
        }
        let primitives = primitives
            .into_iter()
            .map(|p| match p {
                Primitive::Plane { point, normal } => Primitive::Plane { point, normal: normal.normalize() },
                other => other,
            })
            .collect();
        Ok(Self { primitives })
    }

    /// Minimum over primitives; `+inf` for an empty scene.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.primitives.iter().map(|q| q.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// 8 x 6 x 3 m room with two spheres resting on the floor.
    pub fn room() -> Self {
        Self::new(vec![
            Primitive::Room { center: Vector3::new(0.0, 0.0, 1.5), half: Vector3::new(4.0, 3.0, 1.5) },
            Primitive::Sphere { center: Vector3::new(1.8, 1.0, 0.6), radius: 0.6 },
            Primitive::Sphere { center: Vector3::new(-1.5, -1.2, 0.8), radius: 0.8 },
        ])
        .expect("valid room")
    }

    /// 16 m hall along x, lined with boxes and spheres of varying size so
    /// that motion along its axis stays observable.
    pub fn corridor() -> Self {
        let mut prims =
            vec![Primitive::Room { center: Vector3::new(4.5, 0.0, 1.5), half: Vector3::new(8.0, 4.0, 1.5) }];
        for (i, x) in [-2.0, 0.5, 3.0, 5.5, 8.0, 10.5].iter().enumerate() {
            let y = if i % 2 == 0 { 3.0 } else { -3.0 };
            let hz = 0.6 + 0.3 * (i % 3) as f64;
            prims.push(Primitive::Box { center: Vector3::new(*x, y, hz), half: Vector3::new(0.4, 0.5, hz) });
        }
        for (i, x) in [-0.75, 1.75, 4.25, 6.75, 9.25].iter().enumerate() {
            let y = if i % 2 == 0 { -2.2 } else { 2.2 };
            let z = 0.5 + 0.4 * (i % 2) as f64;
            prims.push(Primitive::Sphere { center: Vector3::new(*x, y, z), radius: 0.5 });
        }
        Self::new(prims).expect("valid corridor")
    }

    /// One primitive per line: `sphere cx cy cz r`, `box cx cy cz hx hy hz`,
    /// `room cx cy cz hx hy hz`, `plane px py pz nx ny nz`. `#` starts a
    /// comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut prims = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
            let mut tok = line.split_whitespace();
            let kind = tok.next().unwrap_or_default();
            let nums: Vec<f64> = tok
                .map(|t| t.parse::<f64>().map_err(|_| perr(format!("bad number '{t}'"))))
                .collect::<Result<_>>()?;
            let want = match kind {
                "sphere" => 4,
                "box" | "room" | "plane" => 6,
                other => return Err(perr(format!("unknown primitive '{other}'"))),
            };
            if nums.len() != want {
                return Err(perr(format!("{kind} takes {want} numbers, got {}", nums.len())));
            }
            let a = Vector3::new(nums[0], nums[1], nums[2]);
            let prim = match kind {
                "sphere" => Primitive::Sphere { center: a, radius: nums[3] },
                _ => {
                    let b = Vector3::new(nums[3], nums[4], nums[5]);
                    match kind {
                        "box" => Primitive::Box { center: a, half: b },
                        "room" => Primitive::Room { center: a, half: b },
                        _ => Primitive::Plane { point: a, normal: b },
                    }
                }
            };
            prim.validate().map_err(|e| perr(e.to_string()))?;
            prims.push(prim);
        }
        Self::new(prims)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        self.primitives.iter().map(|p| format!("{p}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPattern {
    pub azimuths: usize,
    /// Elevation angles in radians.
    pub elevations: Vec<f64>,
    pub max_range: f64,
    pub range_sigma: f64,
}

impl Default for ScanPattern {
    fn default() -> Self {
        Self::uniform(360, 16, -15.0, 15.0, 30.0, 0.01).expect("valid default pattern")
    }
}

impl ScanPattern {
    /// `rings` elevations evenly spaced over `[lo_deg, hi_deg]`.
    pub fn uniform(azimuths: usize, rings: usize, lo_deg: f64, hi_deg: f64, max_range: f64, sigma: f64) -> Result<Self> {
        let elevations = if rings == 1 {
            vec![0.5 * (lo_deg + hi_deg).to_radians()]
        } else {
            (0..rings).map(|i| (lo_deg + (hi_deg - lo_deg) * i as f64 / (rings - 1) as f64).to_radians()).collect()
        };
        let p = Self { azimuths, elevations, max_range, range_sigma: sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuths < 16 {
            return Err(Error::InvalidArgument(format!("{} azimuths, need at least 16", self.azimuths)));
        }
        if !(self.range_sigma >= 0.0) || !(self.max_range > 0.0) || self.elevations.is_empty() {
            return Err(Error::InvalidArgument("scan pattern needs sigma >= 0, positive range and elevations".into()));
        }
        Ok(())
    }

    /// Unit ray directions in the sensor frame, elevation-major.
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let mut dirs = Vec::with_capacity(self.azimuths * self.elevations.len());
        for &el in &self.elevations {
            for a in 0..self.azimuths {
                let az = std::f64::consts::TAU * a as f64 / self.azimuths as f64;
                dirs.push(Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        dirs
    }
}

/// Distance to the first surface along `dir` from `origin`, if within
/// `max_range`.
pub fn sphere_trace(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..TRACE_STEPS {
        let d = scene.sdf(&(origin + dir * t));
        if d.abs() < TRACE_TOLERANCE {
            return Some(t);
        }
        t += d;
        if t > max_range || t < 0.0 {
            return None;
        }
    }
    None
}

/// Simulated sensor-frame scan from `pose`. Rays without a hit are dropped.
pub fn simulate_scan(scene: &Scene, pose: &Pose, pattern: &ScanPattern, seed: u64, index: usize) -> Result<LidarScan> {
    pattern.validate()?;
    let origin = *pose.translation();
    let clearance = scene.sdf(&origin);
    if !(clearance > 0.0) {
        return Err(Error::SensorInsideGeometry(clearance));
    }
    let noise = Normal::new(0.0, pattern.range_sigma).expect("validated sigma");
    let rot = *pose.rotation();
    let points: Vec<Vector3<f64>> = pattern
        .directions()
        .par_iter()
        .enumerate()
        .filter_map(|(i, d)| {
            let t = sphere_trace(scene, &origin, &(rot * d), pattern.max_range)?;
            let r = if pattern.range_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
                t + noise.sample(&mut rng)
            } else {
                t
            };
            (r > 0.0).then(|| d * r)
        })
        .collect();
    Ok(LidarScan::new(points, index))
}

/// Poses `start + i * step` with identity rotation.
pub fn straight_line(start: Vector3<f64>, step: Vector3<f64>, n: usize) -> Vec<Pose> {
    (0..n).map(|i| Pose::from_translation(start + step * i as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Twist;

    fn sphere(c: [f64; 3], r: f64) -> Primitive {
        Primitive::Sphere { center: Vector3::from(c), radius: r }
    }

    #[test]
    fn sdf_examples() {
        let s = Scene::new(vec![sphere([0.0, 0.0, 0.0], 1.0)]).unwrap();
        assert_eq!(s.sdf(&Vector3::new(2.0, 0.0, 0.0)), 1.0);
        let p = Scene::new(vec![Primitive::Plane { point: Vector3::zeros(), normal: Vector3::new(0.0, 0.0, 2.0) }])
            .unwrap();
        assert_eq!(p.sdf(&Vector3::new(3.0, -1.0, 0.0)), 0.0);
        assert_eq!(p.sdf(&Vector3::new(3.0, -1.0, 0.5)), 0.5);
        let two = Scene::new(vec![sphere([-2.0, 0.0, 0.0], 1.0), sphere([3.0, 0.0, 0.0], 0.5)]).unwrap();
        let mid = Vector3::new(0.5, 0.0, 0.0);
        assert_eq!(two.sdf(&mid), (2.5f64 - 1.0).min(2.5 - 0.5));
    }

    #[test]
    fn box_sdf_values() {
        let b = Primitive::Box { center: Vector3::zeros(), half: Vector3::new(1.0, 2.0, 3.0) };
        assert_eq!(b.sdf(&Vector3::new(2.0, 0.0, 0.0)), 1.0);
        assert_eq!(b.sdf(&Vector3::zeros()), -1.0);
        assert!((b.sdf(&Vector3::new(2.0, 3.0, 0.0)) - 2f64.sqrt()).abs() < 1e-15);
        let r = Primitive::Room { center: Vector3::zeros(), half: Vector3::new(1.0, 2.0, 3.0) };
        assert_eq!(r.sdf(&Vector3::new(0.5, 0.0, 0.0)), 0.5);
    }

    #[test]
    fn scene_sdf_is_one_lipschitz() {
        use rand::Rng;
        let scenes = [Scene::room(), Scene::corridor()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in &scenes {
            for _ in 0..2000 {
                let a = Vector3::from_fn(|_, _| rng.random_range(-9.0..14.0));
                let b = Vector3::from_fn(|_, _| rng.random_range(-9.0..14.0));
                assert!((s.sdf(&a) - s.sdf(&b)).abs() <= (a - b).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn plane_range_is_exact() {
        let s = Scene::new(vec![Primitive::Plane { point: Vector3::new(5.0, 0.0, 0.0), normal: -Vector3::x() }])
            .unwrap();
        let pat = ScanPattern::uniform(16, 1, 0.0, 0.0, 30.0, 0.0).unwrap();
        let scan = simulate_scan(&s, &Pose::identity(), &pat, 0, 0).unwrap();
        let ahead = scan.points.iter().find(|p| p.y.abs() < 1e-12 && p.x > 0.0).unwrap();
        assert!((ahead.norm() - 5.0).abs() < 1e-6);
        // Rays pointing away from the plane never hit.
        assert!(scan.points.iter().all(|p| p.x > 0.0));
    }

    #[test]
    fn empty_scene_gives_empty_scan() {
        let s = Scene::default();
        let scan = simulate_scan(&s, &Pose::identity(), &ScanPattern::default(), 0, 0).unwrap();
        assert!(scan.is_empty());
        let far = Scene::new(vec![sphere([100.0, 0.0, 0.0], 1.0)]).unwrap();
        assert!(simulate_scan(&far, &Pose::identity(), &ScanPattern::default(), 0, 0).unwrap().is_empty());
    }

    #[test]
    fn noiseless_hits_lie_on_surface() {
        let s = Scene::new(vec![sphere([4.0, 0.0, 0.0], 1.5), sphere([-3.0, 2.0, 0.5], 1.0)]).unwrap();
        let pose = Twist::new(Vector3::new(0.2, -0.1, 0.3), Vector3::new(0.0, 0.1, 0.4)).exp().unwrap();
        let pat = ScanPattern { range_sigma: 0.0, ..ScanPattern::default() };
        let scan = simulate_scan(&s, &pose, &pat, 0, 0).unwrap();
        assert!(!scan.is_empty());
        for p in &scan.points {
            assert!(s.sdf(&pose.transform_point(p)).abs() < TRACE_TOLERANCE);
        }
    }

    #[test]
    fn room_scan_sees_walls() {
        let room = Scene::room();
        let scan = simulate_scan(&room, &Pose::from_translation(Vector3::new(0.0, 0.0, 1.2)), &ScanPattern::default(), 3, 0)
            .unwrap();
        assert!(scan.len() > 5000);
    }

    #[test]
    fn sensor_inside_geometry_is_rejected() {
        let s = Scene::new(vec![sphere([0.0, 0.0, 0.0], 1.0)]).unwrap();
        assert!(matches!(
            simulate_scan(&s, &Pose::identity(), &ScanPattern::default(), 0, 0),
            Err(Error::SensorInsideGeometry(d)) if d == -1.0
        ));
    }

    #[test]
    fn scans_are_deterministic() {
        let room = Scene::room();
        let pose = Pose::from_translation(Vector3::new(0.5, 0.5, 1.2));
        let a = simulate_scan(&room, &pose, &ScanPattern::default(), 9, 0).unwrap();
        let b = simulate_scan(&room, &pose, &ScanPattern::default(), 9, 0).unwrap();
        assert_eq!(a.points, b.points);
        let c = simulate_scan(&room, &pose, &ScanPattern::default(), 10, 0).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn scene_text_round_trip() {
        let room = Scene::room();
        let parsed = Scene::parse(&room.to_text(), Path::new("room.txt")).unwrap();
        assert_eq!(parsed, room);
        let text = "# test\nsphere 0 0 0 1\n\nplane 0 0 0 0 0 1 # floor\n";
        assert_eq!(Scene::parse(text, Path::new("a")).unwrap().primitives.len(), 2);
        match Scene::parse("sphere 0 0 0 1\ncone 1 2 3\n", Path::new("a")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(Scene::parse("sphere 0 0 x 1\n", Path::new("a")).is_err());
        assert!(Scene::parse("sphere 0 0 0 -1\n", Path::new("a")).is_err());
        assert!(ScanPattern::uniform(8, 4, -1.0, 1.0, 10.0, 0.0).is_err());
    }
}
