//! Rotation algebra shared by every filter.
//!
//! Conventions, used throughout the crate:
//! - Hamilton quaternions, scalar first, `q` rotates body-frame vectors into
//!   the navigation frame: `v_n = R(q) v_b`.
//! - Attitude errors are rotation vectors on the *local* (body) side:
//!   `q = q_hat ⊗ Exp(δ)`. Odometry increments are the one exception and
//!   carry their rotation error on the left, `Δq = Exp(ε) ⊗ Δq_hat`; see
//!   [`crate::mains::OdometryIncrement`].

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

pub type Quat = UnitQuaternion<f64>;

/// Drift in `|q|` beyond which inputs are renormalized before use.
const RENORM_THRESHOLD: f64 = 1e-6;

fn renormalized(q: &Quat) -> Quat {
    let n = q.as_ref().norm();
    if (n - 1.0).abs() > RENORM_THRESHOLD {
        Quat::new_normalize(*q.as_ref())
    } else {
        *q
    }
}

/// Hamilton product `a ⊗ b`.
pub fn quat_multiply(a: &Quat, b: &Quat) -> Quat {
    let p = renormalized(a).into_inner() * renormalized(b).into_inner();
    Quat::new_normalize(p)
}

pub fn quat_conjugate(q: &Quat) -> Quat {
    q.conjugate()
}

pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    q.to_rotation_matrix().into_inner()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn exp_map(phi: &Vector3<f64>) -> Quat {
    let angle = phi.norm();
    if angle < 1e-12 {
        // second-order accurate, renormalized
        let q = Quaternion::new(1.0 - angle * angle / 8.0, phi.x / 2.0, phi.y / 2.0, phi.z / 2.0);
        return Quat::new_normalize(q);
    }
    let half = 0.5 * angle;
    let s = half.sin() / angle;
    Quat::new_unchecked(Quaternion::new(half.cos(), phi.x * s, phi.y * s, phi.z * s))
}

/// Logarithm map, returning the rotation vector of norm at most π.
pub fn log_map(q: &Quat) -> Vector3<f64> {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let vn = v.norm();
    if vn < 1e-12 {
        return v * 2.0 / w.max(1e-300);
    }
    let angle = 2.0 * vn.atan2(w);
    v * (angle / vn)
}

/// Inject a local attitude error: `q ⊗ Exp(δ)`.
pub fn error_inject(q: &Quat, delta: &Vector3<f64>) -> Quat {
    if *delta == Vector3::zeros() {
        return *q;
    }
    quat_multiply(q, &exp_map(delta))
}

/// Local attitude error of `q` relative to `reference`: `Log(reference* ⊗ q)`.
/// Inverse of [`error_inject`].
pub fn error_between(reference: &Quat, q: &Quat) -> Vector3<f64> {
    log_map(&quat_multiply(&reference.conjugate(), q))
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < 1e-8 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let a2 = angle * angle;
    Matrix3::identity() - (1.0 - angle.cos()) / a2 * k + (angle - angle.sin()) / (a2 * angle) * k * k
}

/// Quaternion from roll, pitch, yaw (z-y-x intrinsic order).
pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Quat {
    UnitQuaternion::from_euler_angles(roll, pitch, yaw)
}

/// Heading of the body x-axis projected on the navigation x-y plane, radians.
pub fn yaw_of(q: &Quat) -> f64 {
    let r = rotation_matrix(q);
    r[(1, 0)].atan2(r[(0, 0)])
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn quat_strategy() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-zero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quat::new_normalize(Quaternion::new(w, x, y, z)))
    }

    fn small_vec(r: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    #[test]
    fn identity_and_inverse() {
        let q = Quat::new_normalize(Quaternion::new(0.3, -0.2, 0.9, 0.1));
        let id = Quat::identity();
        assert!((quat_multiply(&id, &q).into_inner() - q.into_inner()).norm() < 1e-15);
        let r = quat_multiply(&q, &quat_conjugate(&q));
        assert!((r.into_inner() - id.into_inner()).norm() < 1e-15);
    }

    #[test]
    fn conjugate_negates_vector_part() {
        let q = Quat::new_normalize(Quaternion::new(0.5, 0.5, -0.5, 0.5));
        let c = quat_conjugate(&q);
        assert_eq!((c.w, c.i, c.j, c.k), (q.w, -q.i, -q.j, -q.k));
        assert!((rotation_matrix(&c) - rotation_matrix(&q).transpose()).norm() < 1e-15);
        assert_eq!(quat_conjugate(&Quat::identity()), Quat::identity());
    }

    #[test]
    fn inject_quarter_turn_about_x() {
        let q = error_inject(&Quat::identity(), &Vector3::new(FRAC_PI_2, 0.0, 0.0));
        let expected = Quaternion::new((PI / 4.0).cos(), (PI / 4.0).sin(), 0.0, 0.0);
        assert!((q.into_inner() - expected).norm() < 1e-15);
        let r = rotation_matrix(&q);
        assert!((r * Vector3::y() - Vector3::z()).norm() < 1e-15);
    }

    #[test]
    fn inject_zero_is_identity() {
        let q = Quat::new_normalize(Quaternion::new(0.1, 0.7, -0.2, 0.4));
        assert_eq!(error_inject(&q, &Vector3::zeros()), q);
    }

    #[test]
    fn double_cover_maps_to_same_rotation() {
        let q = Quat::new_normalize(Quaternion::new(0.1, 0.7, -0.2, 0.4));
        let neg = Quat::new_unchecked(-q.into_inner());
        assert!((rotation_matrix(&q) - rotation_matrix(&neg)).norm() < 1e-15);
        assert!(error_between(&q, &neg).norm() < 1e-12);
    }

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let phi = Vector3::new(0.4, -0.3, 0.8);
        let jr = right_jacobian(&phi);
        let h = 1e-6;
        for c in 0..3 {
            let mut d = Vector3::zeros();
            d[c] = h;
            let plus = error_between(&exp_map(&phi), &exp_map(&(phi + d)));
            let minus = error_between(&exp_map(&phi), &exp_map(&(phi - d)));
            let col = (plus - minus) / (2.0 * h);
            assert!((col - jr.column(c)).norm() < 1e-8);
        }
    }

    #[test]
    fn wrap_and_yaw() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI / 2.0 - 2.0 * PI) + PI / 2.0).abs() < 1e-12);
        assert!((yaw_of(&from_euler(0.0, 0.0, 1.2)) - 1.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn product_matches_matrix_composition(a in quat_strategy(), b in quat_strategy()) {
            let ab = quat_multiply(&a, &b);
            let composed = rotation_matrix(&a) * rotation_matrix(&b);
            prop_assert!((rotation_matrix(&ab) - composed).norm() < 1e-12);
            prop_assert!((ab.as_ref().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn rotation_matrix_is_orthonormal(q in quat_strategy()) {
            let r = rotation_matrix(&q);
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn multiply_is_associative(a in quat_strategy(), b in quat_strategy(), c in quat_strategy()) {
            let l = quat_multiply(&quat_multiply(&a, &b), &c);
            let r = quat_multiply(&a, &quat_multiply(&b, &c));
            prop_assert!(error_between(&l, &r).norm() < 1e-12);
        }

        #[test]
        fn inject_then_log_round_trips(q in quat_strategy(), d in small_vec(0.577)) {
            let back = error_between(&q, &error_inject(&q, &d));
            prop_assert!((back - d).norm() < 1e-10);
        }

        #[test]
        fn exp_log_round_trip_on_unit_ball(d in small_vec(0.577)) {
            prop_assert!((log_map(&exp_map(&d)) - d).norm() < 1e-9);
        }
    }
}
