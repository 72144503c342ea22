//! SE(3) poses and tangent-space arithmetic.
//!
//! Poses store a unit quaternion (w, x, y, z) with the sign canonicalized to
//! w >= 0, plus a translation in meters. Tangent vectors ([`Twist`]) stack the
//! translational part first: `[rho; phi]`. All pose updates elsewhere in the
//! crate use the left-multiplicative convention `X <- exp(delta) * X`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Angle threshold below which trigonometric coefficients switch to their
/// Taylor expansions.
const SMALL_ANGLE: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    /// The logarithm is ill-conditioned as the rotation angle approaches pi.
    #[error("rotation angle {angle} rad is within 1e-6 of pi; log map undefined")]
    NearPiRotation { angle: f64 },
}

/// Unit quaternion in (w, x, y, z) order, sign-canonicalized to w >= 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a unit quaternion, normalizing only when the norm is off by
    /// more than 1e-12 so that already-normalized values round-trip bit-exactly.
    pub fn new_normalized(w: f64, x: f64, y: f64, z: f64) -> Quaternion {
        let norm_sq = w * w + x * x + y * y + z * z;
        let q = if (norm_sq - 1.0).abs() > 1e-12 {
            let inv = 1.0 / norm_sq.sqrt();
            Quaternion {
                w: w * inv,
                x: x * inv,
                y: y * inv,
                z: z * inv,
            }
        } else {
            Quaternion { w, x, y, z }
        };
        q.canonicalized()
    }

    /// Flips the sign so that w >= 0, removing the double-cover ambiguity.
    fn canonicalized(self) -> Quaternion {
        if self.w < 0.0 {
            Quaternion {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Hamilton product.
    fn mul(&self, o: &Quaternion) -> Quaternion {
        Quaternion {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    fn conjugate(&self) -> Quaternion {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Rotates a vector: v + 2w(u x v) + 2u x (u x v) with u the vector part.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let u = Vector3::new(self.x, self.y, self.z);
        let uv = u.cross(v);
        v + 2.0 * (self.w * uv + u.cross(&uv))
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> f64 {
        let n = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * n.atan2(self.w.abs())
    }
}

/// Element of SE(3): rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Quaternion,
    translation: Vector3<f64>,
}

/// Tangent-space element of SE(3). `rho` is the translational part in meters,
/// `phi` the rotation vector in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Twist {
        Twist {
            rho: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }

    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Twist {
        Twist { rho, phi }
    }

    /// Stacks as `[rho; phi]`.
    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Twist {
        Twist {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.phi.norm_squared()).sqrt()
    }
}

impl Pose {
    pub fn identity() -> Pose {
        Pose {
            rotation: Quaternion::IDENTITY,
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Pose {
        Pose {
            rotation: Quaternion::new_normalized(rotation.w, rotation.x, rotation.y, rotation.z),
            translation,
        }
    }

    /// Builds from raw quaternion components in (w, x, y, z) order.
    pub fn from_wxyz_translation(
        w: f64,
        x: f64,
        y: f64,
        z: f64,
        translation: Vector3<f64>,
    ) -> Pose {
        Pose {
            rotation: Quaternion::new_normalized(w, x, y, z),
            translation,
        }
    }

    /// Rotation about an axis by `angle` radians, with the given translation.
    pub fn from_axis_angle_translation(
        axis: &Vector3<f64>,
        angle: f64,
        translation: Vector3<f64>,
    ) -> Pose {
        let half = 0.5 * angle;
        let u = axis.normalize() * half.sin();
        Pose {
            rotation: Quaternion::new_normalized(half.cos(), u.x, u.y, u.z),
            translation,
        }
    }

    pub fn rotation(&self) -> &Quaternion {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Group product `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation.mul(&other.rotation);
        Pose {
            rotation: Quaternion::new_normalized(q.w, q.x, q.y, q.z),
            translation: self.translation + self.rotation.rotate(&other.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let qc = self.rotation.conjugate();
        let t = -qc.rotate(&self.translation);
        Pose {
            rotation: qc.canonicalized(),
            translation: t,
        }
    }

    /// Relative pose `self^-1 * other`, so that `self.compose(&result) == other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// Applies the pose to a point (local -> parent frame).
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// SE(3) exponential map.
    pub fn exp(t: &Twist) -> Pose {
        exp_impl(t, false)
    }

    /// SE(3) logarithm. Fails when the rotation angle is within 1e-6 of pi.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let q = &self.rotation;
        let n = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        let theta = 2.0 * n.atan2(q.w);
        if theta >= std::f64::consts::PI - 1e-6 {
            return Err(GeometryError::NearPiRotation { angle: theta });
        }
        let scale = if n > 1e-12 { theta / n } else { 2.0 / q.w };
        let phi = Vector3::new(q.x, q.y, q.z) * scale;
        let v_inv = so3_left_jacobian_inverse(&phi);
        let rho = v_inv * self.translation;
        Ok(Twist { rho, phi })
    }

    /// Angle of the relative rotation between two poses, in radians.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        self.rotation.conjugate().mul(&other.rotation).angle()
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Adjoint of the pose, mapping twists across a frame change:
    /// `T * Exp(xi) * T^-1 = Exp(Ad_T xi)` with `[rho; phi]` stacking.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let tr = skew(&self.translation) * r;
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }
}

pub(crate) fn exp_impl(t: &Twist, force_exact_coeffs: bool) -> Pose {
    let theta_sq = t.phi.norm_squared();
    let theta = theta_sq.sqrt();
    let use_series = theta < SMALL_ANGLE && !force_exact_coeffs;

    // Quaternion from the half-angle: q = (cos(theta/2), sin(theta/2)/theta * phi).
    let half = 0.5 * theta;
    let k = if use_series {
        0.5 - theta_sq / 48.0 + theta_sq * theta_sq / 3840.0
    } else {
        half.sin() / theta
    };
    let u = t.phi * k;
    let rotation = Quaternion::new_normalized(half.cos(), u.x, u.y, u.z);

    // Translation through V(phi) = I + B*Phi + C*Phi^2.
    let (b, c) = if use_series {
        (
            0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
            1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0,
        )
    } else {
        let s = half.sin();
        (
            2.0 * s * s / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    let phi_hat = skew(&t.phi);
    let v = Matrix3::identity() + b * phi_hat + c * phi_hat * phi_hat;
    Pose {
        rotation,
        translation: v * t.rho,
    }
}

/// Skew-symmetric matrix `[v]x` such that `[v]x w = v x w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse left Jacobian of SO(3): `I - Phi/2 + e(theta) Phi^2`.
pub fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let e = if theta < 0.1 {
        1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
            + theta_sq * theta_sq * theta_sq / 1_209_600.0
    } else {
        let a = theta.sin() / theta;
        let s = (0.5 * theta).sin();
        let b = 2.0 * s * s / theta_sq;
        (1.0 - a / (2.0 * b)) / theta_sq
    };
    let phi_hat = skew(phi);
    Matrix3::identity() - 0.5 * phi_hat + e * phi_hat * phi_hat
}

/// Inverse left Jacobian of SE(3) at twist `xi`, with `[rho; phi]` stacking.
///
/// Satisfies `Log(Exp(eps) * Exp(xi)) = xi + Jl_inv(xi) * eps + O(eps^2)`,
/// which is exactly the linearization the pose-graph optimizer needs.
pub fn se3_left_jacobian_inverse(xi: &Twist) -> Matrix6<f64> {
    let jl_inv = so3_left_jacobian_inverse(&xi.phi);
    let q = se3_q_matrix(&xi.rho, &xi.phi);
    let top_right = -jl_inv * q * jl_inv;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&top_right);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    out
}

/// The Q block of the SE(3) left Jacobian (Barfoot's construction).
fn se3_q_matrix(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let (c1, c2, d3) = if theta < 0.1 {
        (
            1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0,
            1.0 / 24.0 - theta_sq / 720.0 + theta_sq * theta_sq / 40320.0,
            -1.0 / 40.0 + theta_sq / 1680.0 - theta_sq * theta_sq / 120_960.0,
        )
    } else {
        let sin_t = theta.sin();
        let cos_t = theta.cos();
        (
            (theta - sin_t) / (theta_sq * theta),
            (1.0 - 0.5 * theta_sq - cos_t) / (theta_sq * theta_sq),
            3.0 * (theta - sin_t - theta_sq * theta / 6.0) / (theta_sq * theta_sq * theta),
        )
    };
    let p = skew(rho);
    let f = skew(phi);
    let fp = f * p;
    let pf = p * f;
    let fpf = fp * f;
    0.5 * p + c1 * (fp + pf + fpf) - c2 * (f * fp + pf * f - 3.0 * fpf)
        - 0.5 * (c2 - d3) * (fpf * f + f * fp * f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    pub(crate) fn random_pose(rng: &mut impl Rng, max_angle: f64, max_trans: f64) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-6 {
            Vector3::x()
        } else {
            axis
        };
        let angle = rng.random_range(0.0..max_angle);
        let t = Vector3::new(
            rng.random_range(-max_trans..max_trans),
            rng.random_range(-max_trans..max_trans),
            rng.random_range(-max_trans..max_trans),
        );
        Pose::from_axis_angle_translation(&axis, angle, t)
    }

    fn rz(angle: f64, t: Vector3<f64>) -> Pose {
        Pose::from_axis_angle_translation(&Vector3::z(), angle, t)
    }

    #[test]
    fn compose_identity_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, 3.0, 5.0);
        let id = Pose::identity();
        assert_abs_diff_eq!(id.compose(&p).translation_distance(&p), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id.compose(&p).rotation_distance(&p), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.compose(&id).translation_distance(&p), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = random_pose(&mut rng, 3.1, 10.0);
            let e = p.compose(&p.inverse());
            assert!(e.rotation_angle() < 1e-9, "angle {}", e.rotation_angle());
            assert!(e.translation().norm() < 1e-9);
            assert!((e.rotation().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn compose_planar_quarter_turns() {
        // Rz(90) + t(1,0,0) twice = Rz(180) + t(1,1,0).
        let step = rz(FRAC_PI_2, Vector3::new(1.0, 0.0, 0.0));
        let got = step.compose(&step);
        let want = rz(PI, Vector3::new(1.0, 1.0, 0.0));
        assert_abs_diff_eq!(got.translation_distance(&want), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got.rotation_distance(&want), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn compose_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_pose(&mut rng, 3.0, 5.0);
            let b = random_pose(&mut rng, 3.0, 5.0);
            let c = random_pose(&mut rng, 3.0, 5.0);
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            assert!(lhs.translation_distance(&rhs) < 1e-9);
            assert!(lhs.rotation_distance(&rhs) < 1e-9);
        }
    }

    #[test]
    fn between_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pose(&mut rng, 3.0, 5.0);
        let e = p.between(&p);
        assert!(e.rotation_angle() < 1e-12 && e.translation().norm() < 1e-12);

        let from_id = Pose::identity().between(&p);
        assert!(from_id.translation_distance(&p) < 1e-12);
        assert!(from_id.rotation_distance(&p) < 1e-12);

        // between(Rz(90), identity) = Rz(-90).
        let q = rz(FRAC_PI_2, Vector3::zeros());
        let rel = q.between(&Pose::identity());
        let want = rz(-FRAC_PI_2, Vector3::zeros());
        assert!(rel.rotation_distance(&want) < 1e-12);
        assert!(rel.translation().norm() < 1e-12);
    }

    #[test]
    fn between_satisfies_compose_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_pose(&mut rng, 3.0, 8.0);
            let b = random_pose(&mut rng, 3.0, 8.0);
            let rel = a.between(&b);
            let back = a.compose(&rel);
            assert!(back.translation_distance(&b) < 1e-9);
            assert!(back.rotation_distance(&b) < 1e-9);
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        let t = Pose::identity().log().unwrap();
        assert_eq!(t.norm(), 0.0);
    }

    #[test]
    fn exp_pure_rotation() {
        let t = Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, FRAC_PI_2));
        let p = Pose::exp(&t);
        let want = rz(FRAC_PI_2, Vector3::zeros());
        assert!(p.rotation_distance(&want) < 1e-12);
        assert!(p.translation().norm() < 1e-15);
    }

    #[test]
    fn exp_zero_is_identity() {
        let p = Pose::exp(&Twist::zero());
        assert_eq!(p.rotation_angle(), 0.0);
        assert_eq!(p.translation().norm(), 0.0);
    }

    #[test]
    fn exp_log_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let p = random_pose(&mut rng, PI - 1e-3, 10.0);
            let back = Pose::exp(&p.log().unwrap());
            max_err = max_err
                .max(back.rotation_distance(&p))
                .max(back.translation_distance(&p));
        }
        assert!(max_err < 1e-9, "max round-trip error {max_err}");
    }

    #[test]
    fn log_exp_roundtrip_random_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = Twist::new(
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ),
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            );
            let back = Pose::exp(&t).log().unwrap();
            assert!((back.as_vector() - t.as_vector()).norm() < 1e-9);
        }
    }

    #[test]
    fn log_rejects_near_pi() {
        let p = rz(PI - 1e-8, Vector3::zeros());
        match p.log() {
            Err(GeometryError::NearPiRotation { .. }) => {}
            other => panic!("expected NearPiRotation, got {other:?}"),
        }
    }

    #[test]
    fn quaternion_canonical_and_normalized_after_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = Pose::identity();
        for _ in 0..500 {
            p = p.compose(&random_pose(&mut rng, 3.0, 2.0));
            assert!((p.rotation().norm() - 1.0).abs() < 1e-9);
            assert!(p.rotation().w >= 0.0);
        }
    }

    #[test]
    fn small_angle_series_matches_exact_at_1e6() {
        // Both coefficient paths evaluated at ||phi|| = 1e-6 must agree.
        let t = Twist::new(
            Vector3::new(0.3, -0.7, 1.1),
            Vector3::new(0.6e-6, -0.48e-6, 0.64e-6),
        );
        let series = exp_impl(&t, false);
        let exact = exp_impl(&t, true);
        assert!(series.translation_distance(&exact) < 1e-10);
        assert!(series.rotation_distance(&exact) < 1e-10);
    }

    #[test]
    fn adjoint_matches_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t = random_pose(&mut rng, 2.5, 3.0);
            let xi = Twist::new(
                Vector3::new(0.01, -0.02, 0.03),
                Vector3::new(-0.005, 0.004, 0.006),
            );
            let lhs = t.compose(&Pose::exp(&xi)).compose(&t.inverse());
            let rhs = Pose::exp(&Twist::from_vector(&(t.adjoint() * xi.as_vector())));
            assert!(lhs.translation_distance(&rhs) < 1e-6);
            assert!(lhs.rotation_distance(&rhs) < 1e-6);
        }
    }

    #[test]
    fn se3_left_jacobian_inverse_matches_finite_differences() {
        // Log(Exp(h e_k) Exp(xi)) - Log(Exp(-h e_k) Exp(xi)) ~ 2h Jl_inv(xi) e_k.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-6;
        for _ in 0..50 {
            let xi = Twist::new(
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ),
                Vector3::new(
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                ),
            );
            let base = Pose::exp(&xi);
            let analytic = se3_left_jacobian_inverse(&xi);
            for k in 0..6 {
                let mut step = Vector6::zeros();
                step[k] = h;
                let plus = Pose::exp(&Twist::from_vector(&step))
                    .compose(&base)
                    .log()
                    .unwrap();
                step[k] = -h;
                let minus = Pose::exp(&Twist::from_vector(&step))
                    .compose(&base)
                    .log()
                    .unwrap();
                let fd = (plus.as_vector() - minus.as_vector()) / (2.0 * h);
                let col = analytic.column(k).clone_owned();
                assert!(
                    (fd - col).norm() <= 1e-5 * col.norm().max(1.0),
                    "column {k}: fd {fd:?} vs analytic {col:?}"
                );
            }
        }
    }
}
