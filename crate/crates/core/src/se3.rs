//! Rigid-body transforms, the SE(3) exponential/logarithm and the point
//! Jacobian used to push loss gradients onto a 6-dimensional pose update.
//!
//! Pose increments are left-multiplied twists: `T <- exp(delta) * T`.

use nalgebra::{Matrix3, Matrix3x6, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-10;
// Below this rotation angle the closed forms lose precision; Taylor series
// carried to fourth order are exact to machine precision here.
const SMALL_ANGLE: f64 = 1e-4;

/// Skew-symmetric cross-product matrix: `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Tangent-space increment: translational part `rho` (meters) and
/// rotational part `phi` (radians, axis-angle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self { rho: Vector3::zeros(), phi: Vector3::zeros() }
    }

    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    /// Packs as `(rho, phi)`, matching the column order of [`Pose::transform_jacobian`].
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.phi.iter()).all(|c| c.is_finite())
    }

    /// SE(3) exponential map.
    pub fn exp(&self) -> Result<Pose> {
        if !self.is_finite() {
            return Err(Error::NonFinite(format!("twist {:?}", self.to_vector().as_slice())));
        }
        let theta2 = self.phi.norm_squared();
        let theta = theta2.sqrt();
        let w = hat(&self.phi);
        let w2 = w * w;
        // a = sin(t)/t, b = (1 - cos t)/t^2, c = (t - sin t)/t^3
        let (a, b, c) = if theta < SMALL_ANGLE {
            (
                1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
                0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
                1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
            )
        } else {
            let (s, co) = theta.sin_cos();
            (s / theta, (1.0 - co) / theta2, (theta - s) / (theta2 * theta))
        };
        let rotation = Matrix3::identity() + w * a + w2 * b;
        let v = Matrix3::identity() + w * b + w2 * c;
        Ok(Pose::from_parts_unchecked(rotation, v * self.rho))
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Builds a pose, projecting `rotation` back onto SO(3) if it drifted.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|c| c.is_finite()) {
            return Err(Error::NonFinite("pose components".into()));
        }
        let mut pose = Self { rotation, translation };
        pose.renormalize_if_needed(1e-6)?;
        Ok(pose)
    }

    fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Largest elementwise deviation of `R^T R` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    fn renormalize_if_needed(&mut self, tol: f64) -> Result<()> {
        if self.orthonormality_error() > tol || self.rotation.determinant() < 0.0 {
            self.rotation = project_to_so3(&self.rotation)?;
        }
        Ok(())
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut out = Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if out.orthonormality_error() > ORTHO_TOL {
            // Products of valid rotations never fail to project.
            out.rotation = project_to_so3(&out.rotation).unwrap_or(out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Derivative of `exp(delta) * self * x` with respect to `delta` at zero,
    /// columns ordered `(rho, phi)`: `[I | -hat(self * x)]`.
    pub fn transform_jacobian(&self, x: &Vector3<f64>) -> Matrix3x6<f64> {
        let y = self.transform_point(x);
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&y)));
        j
    }

    /// Left-applies a twist increment.
    pub fn retract(&self, delta: &Twist) -> Result<Pose> {
        Ok(delta.exp()?.compose(self))
    }

    /// SE(3) logarithm. Used for diagnostics and metrics only.
    pub fn log(&self) -> Twist {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let phi = q.scaled_axis();
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let w = hat(&phi);
        // V^-1 = I - w/2 + d w^2, d = (1 - t sin t / (2 (1 - cos t))) / t^2
        let d = if theta < SMALL_ANGLE {
            1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
        } else {
            let (s, c) = theta.sin_cos();
            (1.0 - theta * s / (2.0 * (1.0 - c))) / theta2
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w * w * d;
        Twist { rho: v_inv * self.translation, phi }
    }

    /// Rotation angle of `R` in radians.
    pub fn rotation_angle(&self) -> f64 {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation)).angle()
    }

    /// Row-major 3x4 `[R | t]`, the KITTI pose-file convention.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Self::from_parts(rotation, translation)
    }
}

/// Nearest rotation matrix (Frobenius norm) via SVD.
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NonFinite("rotation SVD".into())),
    };
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    Ok(u * fix * vt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn matrix_exp_series(a: &Matrix3<f64>) -> Matrix3<f64> {
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for k in 1..40 {
            term = term * a / k as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = Twist::zero().exp().unwrap();
        assert_eq!(*p.rotation(), Matrix3::identity());
        assert_eq!(*p.translation(), Vector3::zeros());
    }

    #[test]
    fn exp_pure_translation() {
        let p = Twist::new(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros()).exp().unwrap();
        assert_eq!(*p.rotation(), Matrix3::identity());
        assert_eq!(*p.translation(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let phi = Vector3::new(0.0, 0.0, FRAC_PI_2);
        let p = Twist::new(Vector3::zeros(), phi).exp().unwrap();
        let oracle = matrix_exp_series(&hat(&phi));
        assert!((p.rotation() - oracle).amax() < 1e-9);
        let moved = p.transform_point(&Vector3::x());
        assert!((moved - Vector3::y()).amax() < 1e-9);
    }

    #[test]
    fn exp_rejects_non_finite() {
        let t = Twist::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert!(matches!(t.exp(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn small_angle_branch_matches_series_oracle() {
        for &theta in &[1e-12, 1e-9, 1e-6, 5e-5, 2e-4] {
            let phi = Vector3::new(0.3, -0.5, 0.8).normalize() * theta;
            let rho = Vector3::new(0.2, 0.1, -0.4);
            let mut a = nalgebra::Matrix4::zeros();
            a.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&phi));
            a.fixed_view_mut::<3, 1>(0, 3).copy_from(&rho);
            let mut term = nalgebra::Matrix4::identity();
            let mut sum = nalgebra::Matrix4::identity();
            for k in 1..30 {
                term = term * a / k as f64;
                sum += term;
            }
            let p = Twist::new(rho, phi).exp().unwrap();
            assert!((p.rotation() - sum.fixed_view::<3, 3>(0, 0)).amax() < 1e-13);
            assert!((p.translation() - sum.fixed_view::<3, 1>(0, 3)).amax() < 1e-13);
        }
    }

    #[test]
    fn transform_point_examples() {
        let x = Vector3::new(5.0, 6.0, 7.0);
        assert_eq!(Pose::identity().transform_point(&x), x);
        let t = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.transform_point(&Vector3::zeros()), Vector3::new(1.0, 0.0, 0.0));
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let p = Pose::from_parts(rz, Vector3::new(1.0, 1.0, 0.0)).unwrap();
        assert!((p.transform_point(&Vector3::x()) - Vector3::new(1.0, 2.0, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn jacobian_structure() {
        let p = Pose::identity();
        let j = p.transform_jacobian(&Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(j.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::identity());
        assert_eq!(j.column(3).into_owned(), Vector3::new(0.0, -1.0, 0.0));
        assert_eq!(j.column(4).into_owned(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(j.column(5).into_owned(), Vector3::zeros());
    }

    #[test]
    fn row_major_identity() {
        let p = Pose::from_row_major_3x4(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
            .unwrap();
        assert_eq!(p, Pose::identity());
    }

    #[test]
    fn from_parts_repairs_drift() {
        let mut r = Twist::new(Vector3::zeros(), Vector3::new(0.1, 0.2, 0.3)).exp().unwrap().rotation;
        r[(0, 1)] += 1e-4;
        let p = Pose::from_parts(r, Vector3::zeros()).unwrap();
        assert!(p.orthonormality_error() < 1e-12);
        assert!((p.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    fn twist_strategy(max_angle: f64) -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform3(-1.0f64..1.0),
            0.0..max_angle,
        )
            .prop_map(|(r, a, ang)| {
                let axis = Vector3::from(a);
                let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis.normalize() };
                Twist::new(Vector3::from(r), axis * ang)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn log_inverts_exp(t in twist_strategy(std::f64::consts::PI - 0.1)) {
            let back = t.exp().unwrap().log();
            prop_assert!((back.to_vector() - t.to_vector()).amax() < 1e-9);
        }

        #[test]
        fn compose_matches_sequential(a in twist_strategy(3.0), b in twist_strategy(3.0),
                                      x in prop::array::uniform3(-10.0f64..10.0)) {
            let (pa, pb) = (a.exp().unwrap(), b.exp().unwrap());
            let x = Vector3::from(x);
            let seq = pa.transform_point(&pb.transform_point(&x));
            prop_assert!((pa.compose(&pb).transform_point(&x) - seq).amax() < 1e-12);
        }

        #[test]
        fn compose_with_inverse_is_identity(a in twist_strategy(3.0)) {
            let p = a.exp().unwrap();
            let id = p.compose(&p.inverse());
            prop_assert!((id.rotation() - Matrix3::identity()).amax() < 1e-9);
            prop_assert!(id.translation().amax() < 1e-9);
            prop_assert!(p.orthonormality_error() < 1e-9);
            prop_assert!((p.rotation().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..1000 {
            let t = Twist::new(
                Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
                Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5)),
            );
            let pose = t.exp().unwrap();
            let x = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let j = pose.transform_jacobian(&x);
            for k in 0..6 {
                let mut e = Vector6::zeros();
                e[k] = h;
                let plus = pose.retract(&Twist::from_vector(&e)).unwrap().transform_point(&x);
                let minus = pose.retract(&Twist::from_vector(&-e)).unwrap().transform_point(&x);
                let fd = (plus - minus) / (2.0 * h);
                let col = j.column(k).into_owned();
                let rel = (fd - col).norm() / col.norm().max(1.0);
                assert!(rel < 1e-5, "column {k}: rel err {rel}");
            }
        }
    }
}
