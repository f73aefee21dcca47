//! First-degree polynomial model of the magnetic field over the array footprint.
//!
//! The field is the gradient of a degree-2 harmonic potential, so it is affine in
//! position with a symmetric, traceless gradient. Coordinates and field are in
//! the body frame. Field values are µT, positions m.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::geom::{rotation_matrix, skew, Quat};

/// Number of coefficients for the first-degree model.
pub const NUM_COEFFS: usize = 8;

/// Coefficient count `n² + 4n + 3` of the degree-`n` polynomial field model.
pub const fn coeff_count(degree: usize) -> usize {
    degree * degree + 4 * degree + 3
}

const _: () = assert!(coeff_count(1) == NUM_COEFFS);

pub type Regressor = SMatrix<f64, 3, NUM_COEFFS>;

/// Coefficients θ: `θ[0..3]` mean field (µT), `θ[3..8]` gradient parameters (µT/m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFieldCoeffs(pub SVector<f64, NUM_COEFFS>);

impl LocalFieldCoeffs {
    pub fn zeros() -> Self {
        Self(SVector::zeros())
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self(SVector::from_column_slice(s))
    }

    pub fn mean(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    /// Build coefficients from a mean field and a gradient matrix. The gradient
    /// is projected onto the symmetric traceless subspace first.
    pub fn from_mean_and_gradient(mean: &Vector3<f64>, gradient: &Matrix3<f64>) -> Self {
        let g = project_symmetric_traceless(gradient);
        let mut t = SVector::<f64, NUM_COEFFS>::zeros();
        t.fixed_rows_mut::<3>(0).copy_from(mean);
        t[3] = g[(1, 2)];
        t[4] = 0.5 * g[(1, 1)];
        t[5] = g[(0, 2)];
        t[6] = g[(0, 1)];
        t[7] = 0.5 * g[(0, 0)];
        Self(t)
    }
}

pub fn project_symmetric_traceless(m: &Matrix3<f64>) -> Matrix3<f64> {
    let s = 0.5 * (m + m.transpose());
    s - Matrix3::identity() * (s.trace() / 3.0)
}

/// Regressor Φ(r) such that the field at body-frame position `r` is `Φ(r) θ`.
pub fn regressor(r: &Vector3<f64>) -> Regressor {
    let (x, y, z) = (r.x, r.y, r.z);
    #[rustfmt::skip]
    let phi = Regressor::from_row_slice(&[
        1.0, 0.0, 0.0, 0.0, 0.0,      z,   y,  2.0 * x,
        0.0, 1.0, 0.0, z,   2.0 * y,  0.0, x,  0.0,
        0.0, 0.0, 1.0, y,  -2.0 * z,  x,   0.0, -2.0 * z,
    ]);
    phi
}

pub fn evaluate_field(theta: &LocalFieldCoeffs, r: &Vector3<f64>) -> Vector3<f64> {
    regressor(r) * theta.0
}

/// Spatial gradient of the local field, `∂M/∂r`. Symmetric and traceless.
pub fn field_gradient(theta: &LocalFieldCoeffs) -> Matrix3<f64> {
    let t = &theta.0;
    Matrix3::new(
        2.0 * t[7],
        t[6],
        t[5],
        t[6],
        2.0 * t[4],
        t[3],
        t[5],
        t[3],
        -2.0 * (t[7] + t[4]),
    )
}

/// Rigid-motion transport of the affine field into a new body frame.
///
/// `delta_q` is the body rotation from the old to the new frame and
/// `delta_p_body` the displacement of the array centre expressed in the old
/// body frame.
pub fn transport_coeffs(theta: &LocalFieldCoeffs, delta_q: &Quat, delta_p_body: &Vector3<f64>) -> LocalFieldCoeffs {
    let r = rotation_matrix(delta_q);
    let g = field_gradient(theta);
    let mean = r.transpose() * (theta.mean() + g * delta_p_body);
    let grad = r.transpose() * g * r;
    LocalFieldCoeffs::from_mean_and_gradient(&mean, &grad)
}

/// Linear map `θ ↦ transport_coeffs(θ, Δq, Δp)` as an 8×8 matrix.
pub fn transport_matrix(delta_q: &Quat, delta_p_body: &Vector3<f64>) -> SMatrix<f64, NUM_COEFFS, NUM_COEFFS> {
    let mut t = SMatrix::<f64, NUM_COEFFS, NUM_COEFFS>::zeros();
    for c in 0..NUM_COEFFS {
        let mut e = LocalFieldCoeffs::zeros();
        e.0[c] = 1.0;
        t.set_column(c, &transport_coeffs(&e, delta_q, delta_p_body).0);
    }
    t
}

/// Derivative of the transported coefficients with respect to the displacement.
pub fn transport_jacobian_displacement(theta: &LocalFieldCoeffs, delta_q: &Quat) -> SMatrix<f64, NUM_COEFFS, 3> {
    let r = rotation_matrix(delta_q);
    let mut j = SMatrix::<f64, NUM_COEFFS, 3>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r.transpose() * field_gradient(theta)));
    j
}

/// Derivative of the transported coefficients with respect to a local
/// perturbation ε of the rotation, `Δq ⊗ Exp(ε)`.
pub fn transport_jacobian_rotation(
    theta: &LocalFieldCoeffs,
    delta_q: &Quat,
    delta_p_body: &Vector3<f64>,
) -> SMatrix<f64, NUM_COEFFS, 3> {
    let r = rotation_matrix(delta_q);
    let g = field_gradient(theta);
    let mean = r.transpose() * (theta.mean() + g * delta_p_body);
    let grad = r.transpose() * g * r;
    let mut j = SMatrix::<f64, NUM_COEFFS, 3>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&mean));
    for c in 0..3 {
        let k = skew(&Vector3::ith(c, 1.0));
        let dg = grad * k - k * grad;
        let packed = LocalFieldCoeffs::from_mean_and_gradient(&Vector3::zeros(), &dg);
        j.fixed_view_mut::<5, 1>(3, c).copy_from(&packed.0.fixed_rows::<5>(3));
    }
    j
}

/// Least-squares fit of θ to field samples at body-frame positions.
/// Returns `None` when the positions do not determine all eight coefficients.
pub fn fit_least_squares(positions: &[Vector3<f64>], fields: &[Vector3<f64>]) -> Option<LocalFieldCoeffs> {
    assert_eq!(positions.len(), fields.len());
    let mut info = SMatrix::<f64, NUM_COEFFS, NUM_COEFFS>::zeros();
    let mut rhs = SVector::<f64, NUM_COEFFS>::zeros();
    for (r, b) in positions.iter().zip(fields) {
        let phi = regressor(r);
        info += phi.transpose() * phi;
        rhs += phi.transpose() * b;
    }
    info.cholesky().map(|c| LocalFieldCoeffs(c.solve(&rhs)))
}
