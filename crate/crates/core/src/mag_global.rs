//! Reduced-rank Gaussian-process model of the magnetic field on building scale.
//!
//! The scalar potential is modelled with a linear kernel plus a squared-exponential
//! kernel, the latter approximated by Laplace eigenfunctions of a cuboid with
//! Dirichlet boundary conditions. The field is the gradient of the potential and
//! is linear in the weights η, with prior `η ~ N(0, Λ)`. Coordinates and field are
//! in the navigation frame.
//!
//! The cuboid is `center + [-L_x, L_x] × [-L_y, L_y] × [-L_z, L_z]`. The field is
//! curl-free by construction; it is only approximately divergence-free, because
//! each basis function has Laplacian `-λ_j² ψ_j`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("hyperparameter {name} must be positive, got {value}")]
    NonPositiveHyperparameter { name: &'static str, value: f64 },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("map file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpHyperparameters {
    /// Linear-kernel magnitude, µT.
    pub sigma_lin: f64,
    /// Squared-exponential magnitude, µT·m.
    pub sigma_se: f64,
    /// Squared-exponential length scale, m.
    pub length_scale: f64,
}

impl Default for GpHyperparameters {
    fn default() -> Self {
        Self { sigma_lin: 30.0, sigma_se: 3.5, length_scale: 0.7 }
    }
}

impl GpHyperparameters {
    pub fn validate(&self) -> Result<(), GpError> {
        for (name, value) in
            [("sigma_lin", self.sigma_lin), ("sigma_se", self.sigma_se), ("length_scale", self.length_scale)]
        {
            if !(value > 0.0 && value.is_finite()) {
                return Err(GpError::NonPositiveHyperparameter { name, value });
            }
        }
        Ok(())
    }
}

/// Cuboid domain, selected Laplace modes and kernel hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GpDomain {
    half_lengths: Vector3<f64>,
    center: Vector3<f64>,
    modes: Vec<[u32; 3]>,
    axis_counts: [u32; 3],
    hyper: GpHyperparameters,
}

fn lambda_sq_of(half_lengths: &Vector3<f64>, n: &[u32; 3]) -> f64 {
    (0..3).map(|d| (PI * n[d] as f64 / (2.0 * half_lengths[d])).powi(2)).sum()
}

fn mode_order(a: &(f64, [u32; 3]), b: &(f64, [u32; 3])) -> std::cmp::Ordering {
    let scale = a.0.abs().max(b.0.abs()).max(1e-300);
    if (a.0 - b.0).abs() <= 1e-12 * scale {
        a.1.cmp(&b.1)
    } else {
        a.0.total_cmp(&b.0)
    }
}

impl GpDomain {
    /// Domain keeping the `num_modes` modes with the smallest eigenvalues.
    pub fn new(
        half_lengths: Vector3<f64>,
        center: Vector3<f64>,
        num_modes: usize,
        hyper: GpHyperparameters,
    ) -> Result<Self, GpError> {
        hyper.validate()?;
        if half_lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(GpError::InvalidDomain(format!("half-lengths must be positive, got {half_lengths:?}")));
        }
        let mut modes = Vec::new();
        if num_modes > 0 {
            // grow the eigenvalue cutoff until enough modes fall below it
            let mut cutoff = PI / (2.0 * half_lengths.min()) * 2.0;
            loop {
                let caps: Vec<u32> = (0..3).map(|d| (cutoff * 2.0 * half_lengths[d] / PI).floor() as u32).collect();
                let mut cand = Vec::new();
                for nx in 1..=caps[0] {
                    for ny in 1..=caps[1] {
                        for nz in 1..=caps[2] {
                            let n = [nx, ny, nz];
                            let l2 = lambda_sq_of(&half_lengths, &n);
                            if l2 <= cutoff * cutoff {
                                cand.push((l2, n));
                            }
                        }
                    }
                }
                if cand.len() >= num_modes {
                    cand.sort_by(mode_order);
                    cand.truncate(num_modes);
                    modes = cand.into_iter().map(|(_, n)| n).collect();
                    break;
                }
                cutoff *= 1.25;
            }
        }
        Ok(Self::from_parts(half_lengths, center, modes, hyper))
    }

    /// Domain with an explicit mode list. Modes are re-sorted by eigenvalue.
    pub fn with_modes(
        half_lengths: Vector3<f64>,
        center: Vector3<f64>,
        modes: Vec<[u32; 3]>,
        hyper: GpHyperparameters,
    ) -> Result<Self, GpError> {
        hyper.validate()?;
        if half_lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(GpError::InvalidDomain(format!("half-lengths must be positive, got {half_lengths:?}")));
        }
        if modes.iter().any(|n| n.contains(&0)) {
            return Err(GpError::InvalidDomain("mode indices start at 1".into()));
        }
        let mut cand: Vec<_> = modes.into_iter().map(|n| (lambda_sq_of(&half_lengths, &n), n)).collect();
        cand.sort_by(mode_order);
        if cand.windows(2).any(|w| w[0].1 == w[1].1) {
            return Err(GpError::InvalidDomain("duplicate mode triplet".into()));
        }
        Ok(Self::from_parts(half_lengths, center, cand.into_iter().map(|(_, n)| n).collect(), hyper))
    }

    /// Domain covering an axis-aligned bounding box with a relative margin plus
    /// two length scales on each side.
    pub fn covering(
        min: Vector3<f64>,
        max: Vector3<f64>,
        margin: f64,
        num_modes: usize,
        hyper: GpHyperparameters,
    ) -> Result<Self, GpError> {
        hyper.validate()?;
        let center = 0.5 * (min + max);
        let half = (0.5 * (max - min)).map(|h| h.abs() * (1.0 + margin) + 2.0 * hyper.length_scale);
        Self::new(half, center, num_modes, hyper)
    }

    fn from_parts(half_lengths: Vector3<f64>, center: Vector3<f64>, modes: Vec<[u32; 3]>, hyper: GpHyperparameters) -> Self {
        let mut axis_counts = [0u32; 3];
        for n in &modes {
            for d in 0..3 {
                axis_counts[d] = axis_counts[d].max(n[d]);
            }
        }
        Self { half_lengths, center, modes, axis_counts, hyper }
    }

    pub fn half_lengths(&self) -> Vector3<f64> {
        self.half_lengths
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    pub fn modes(&self) -> &[[u32; 3]] {
        &self.modes
    }

    /// Largest per-axis index among the selected modes.
    pub fn axis_counts(&self) -> [u32; 3] {
        self.axis_counts
    }

    pub fn hyper(&self) -> &GpHyperparameters {
        &self.hyper
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// Dimension of η, `3 + m`.
    pub fn dim(&self) -> usize {
        3 + self.modes.len()
    }

    pub fn contains(&self, r: &Vector3<f64>) -> bool {
        (0..3).all(|d| (r[d] - self.center[d]).abs() <= self.half_lengths[d])
    }

    pub fn eigenvalue_sq(&self, j: usize) -> f64 {
        lambda_sq_of(&self.half_lengths, &self.modes[j])
    }

    pub fn eigenfunction(&self, j: usize, r: &Vector3<f64>) -> f64 {
        let n = &self.modes[j];
        (0..3)
            .map(|d| {
                let l = self.half_lengths[d];
                (PI * n[d] as f64 * (r[d] - self.center[d] + l) / (2.0 * l)).sin() / l.sqrt()
            })
            .product()
    }

    /// Spectral density of the squared-exponential kernel in three dimensions.
    pub fn se_spectral_density(&self, lambda_sq: f64) -> f64 {
        let GpHyperparameters { sigma_se, length_scale: l, .. } = self.hyper;
        sigma_se * sigma_se * (2.0 * PI * l * l).powf(1.5) * (-0.5 * lambda_sq * l * l).exp()
    }

    /// Diagonal of Λ: three linear-kernel variances, then `S_SE(λ_j)`.
    pub fn prior_covariance(&self) -> DVector<f64> {
        let s2 = self.hyper.sigma_lin * self.hyper.sigma_lin;
        DVector::from_iterator(
            self.dim(),
            [s2; 3].into_iter().chain((0..self.num_modes()).map(|j| self.se_spectral_density(self.eigenvalue_sq(j)))),
        )
    }

    /// Squared-exponential kernel value, for comparison with the basis expansion.
    pub fn se_kernel(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let GpHyperparameters { sigma_se, length_scale: l, .. } = self.hyper;
        sigma_se * sigma_se * (-(a - b).norm_squared() / (2.0 * l * l)).exp()
    }

    /// Basis-function approximation `Σ_j S(λ_j) ψ_j(a) ψ_j(b)` of the SE kernel.
    pub fn reduced_rank_kernel(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        (0..self.num_modes())
            .map(|j| self.se_spectral_density(self.eigenvalue_sq(j)) * self.eigenfunction(j, a) * self.eigenfunction(j, b))
            .sum()
    }

    /// Row `Ψ(r) = [rᵀ ψ_1(r) … ψ_m(r)]`.
    pub fn potential_regressor(&self, r: &Vector3<f64>) -> DVector<f64> {
        let trig = AxisTrig::new(self, r);
        let mut out = DVector::zeros(self.dim());
        out.fixed_rows_mut::<3>(0).copy_from(r);
        for (j, n) in self.modes.iter().enumerate() {
            out[3 + j] = trig.norm * trig.s[0][n[0] as usize] * trig.s[1][n[1] as usize] * trig.s[2][n[2] as usize];
        }
        out
    }

    /// Field regressor `∇Ψ(r)`, a 3×(3+m) matrix with the field at `r` given by `∇Ψ(r) η`.
    pub fn field_regressor(&self, r: &Vector3<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(3, self.dim());
        self.fill_field_regressor(r, &mut out, None);
        out
    }

    /// Field regressor together with the field value and its spatial Jacobian
    /// for the weights `eta`. Returns `(∇Ψ(r), M(r), ∂M/∂r)`.
    pub fn field_regressor_with_jacobian(
        &self,
        r: &Vector3<f64>,
        eta: &DVector<f64>,
    ) -> (DMatrix<f64>, Vector3<f64>, Matrix3<f64>) {
        let mut out = DMatrix::zeros(3, self.dim());
        let mut hess = Matrix3::zeros();
        self.fill_field_regressor(r, &mut out, Some((eta, &mut hess)));
        let field = &out * eta;
        (out, Vector3::new(field[0], field[1], field[2]), hess)
    }

    fn fill_field_regressor(&self, r: &Vector3<f64>, out: &mut DMatrix<f64>, mut hess: Option<(&DVector<f64>, &mut Matrix3<f64>)>) {
        debug_assert_eq!(out.ncols(), self.dim());
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        let t = AxisTrig::new(self, r);
        for (j, n) in self.modes.iter().enumerate() {
            let (nx, ny, nz) = (n[0] as usize, n[1] as usize, n[2] as usize);
            let (sx, sy, sz) = (t.s[0][nx], t.s[1][ny], t.s[2][nz]);
            let (cx, cy, cz) = (t.c[0][nx], t.c[1][ny], t.c[2][nz]);
            let (kx, ky, kz) = (t.k[0] * n[0] as f64, t.k[1] * n[1] as f64, t.k[2] * n[2] as f64);
            let col = 3 + j;
            out[(0, col)] = t.norm * kx * cx * sy * sz;
            out[(1, col)] = t.norm * ky * sx * cy * sz;
            out[(2, col)] = t.norm * kz * sx * sy * cz;
            if let Some((eta, h)) = hess.as_mut() {
                let w = eta[col] * t.norm;
                if w != 0.0 {
                    let psi = sx * sy * sz;
                    h[(0, 0)] -= w * kx * kx * psi;
                    h[(1, 1)] -= w * ky * ky * psi;
                    h[(2, 2)] -= w * kz * kz * psi;
                    let xy = w * kx * ky * cx * cy * sz;
                    let xz = w * kx * kz * cx * sy * cz;
                    let yz = w * ky * kz * sx * cy * cz;
                    h[(0, 1)] += xy;
                    h[(1, 0)] += xy;
                    h[(0, 2)] += xz;
                    h[(2, 0)] += xz;
                    h[(1, 2)] += yz;
                    h[(2, 1)] += yz;
                }
            }
        }
    }

    pub fn evaluate_global_field(&self, eta: &DVector<f64>, r: &Vector3<f64>) -> Vector3<f64> {
        let b = self.field_regressor(r) * eta;
        Vector3::new(b[0], b[1], b[2])
    }
}

/// Per-axis sines and cosines of `n·a_d` for every index up to the axis count.
struct AxisTrig {
    s: [Vec<f64>; 3],
    c: [Vec<f64>; 3],
    k: [f64; 3],
    norm: f64,
}

impl AxisTrig {
    fn new(domain: &GpDomain, r: &Vector3<f64>) -> Self {
        let mut s: [Vec<f64>; 3] = Default::default();
        let mut c: [Vec<f64>; 3] = Default::default();
        let mut k = [0.0; 3];
        for d in 0..3 {
            let l = domain.half_lengths[d];
            k[d] = PI / (2.0 * l);
            let a = k[d] * (r[d] - domain.center[d] + l);
            let count = domain.axis_counts[d] as usize;
            s[d] = (0..=count).map(|n| (n as f64 * a).sin()).collect();
            c[d] = (0..=count).map(|n| (n as f64 * a).cos()).collect();
        }
        let norm = 1.0 / domain.half_lengths.iter().product::<f64>().sqrt();
        Self { s, c, k, norm }
    }
}

/// Sequential information-form conditioning of η on field measurements.
#[derive(Debug, Clone)]
pub struct GpInformation {
    info: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl GpInformation {
    pub fn from_prior(prior_diag: &DVector<f64>) -> Self {
        let info = DMatrix::from_diagonal(&prior_diag.map(|v| 1.0 / v));
        Self { info, rhs: DVector::zeros(prior_diag.len()) }
    }

    /// Condition on one 3-axis field measurement at `r` with isotropic noise variance.
    pub fn add_measurement(&mut self, domain: &GpDomain, r: &Vector3<f64>, field: &Vector3<f64>, noise_var: f64) {
        let h = domain.field_regressor(r);
        self.info.gemm_tr(1.0 / noise_var, &h, &h, 1.0);
        self.rhs.gemv_tr(1.0 / noise_var, &h, &DVector::from_column_slice(field.as_slice()), 1.0);
    }

    pub fn information(&self) -> &DMatrix<f64> {
        &self.info
    }

    pub fn posterior_mean(&self) -> Option<DVector<f64>> {
        let sym = 0.5 * (&self.info + self.info.transpose());
        sym.cholesky().map(|c| c.solve(&self.rhs))
    }

    pub fn posterior_covariance(&self) -> Option<DMatrix<f64>> {
        let sym = 0.5 * (&self.info + self.info.transpose());
        sym.cholesky().map(|c| c.inverse())
    }
}

/// Write the domain, mode list, weights and their variances as a text map file.
pub fn export_map<W: Write>(mut w: W, domain: &GpDomain, eta: &DVector<f64>, variance: &DVector<f64>) -> Result<(), GpError> {
    let l = domain.half_lengths;
    let c = domain.center;
    let h = domain.hyper;
    writeln!(w, "# imslam-map v1")?;
    writeln!(w, "# half_lengths = {} {} {}", l.x, l.y, l.z)?;
    writeln!(w, "# center = {} {} {}", c.x, c.y, c.z)?;
    writeln!(w, "# sigma_lin = {}", h.sigma_lin)?;
    writeln!(w, "# sigma_se = {}", h.sigma_se)?;
    writeln!(w, "# length_scale = {}", h.length_scale)?;
    writeln!(w, "# modes = {}", domain.num_modes())?;
    writeln!(w, "index,nx,ny,nz,lambda_sq,eta,variance")?;
    for i in 0..3 {
        writeln!(w, "{i},0,0,0,0,{},{}", eta[i], variance[i])?;
    }
    for (j, n) in domain.modes.iter().enumerate() {
        writeln!(w, "{},{},{},{},{},{},{}", 3 + j, n[0], n[1], n[2], domain.eigenvalue_sq(j), eta[3 + j], variance[3 + j])?;
    }
    Ok(())
}

/// Read a map written by [`export_map`].
pub fn import_map<R: BufRead>(r: R) -> Result<(GpDomain, DVector<f64>, DVector<f64>), GpError> {
    let mut meta = std::collections::BTreeMap::new();
    let mut rows = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if line.is_empty() || line.starts_with("index") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(GpError::Parse(format!("line {}: expected 7 fields", lineno + 1)));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| GpError::Parse(format!("line {}: {e}", lineno + 1)));
        let n = [parse(fields[1])? as u32, parse(fields[2])? as u32, parse(fields[3])? as u32];
        rows.push((n, parse(fields[5])?, parse(fields[6])?));
    }
    let vec3 = |key: &str| -> Result<Vector3<f64>, GpError> {
        let v = meta.get(key).ok_or_else(|| GpError::Parse(format!("missing {key}")))?;
        let parts: Result<Vec<f64>, _> = v.split_whitespace().map(str::parse).collect();
        let parts = parts.map_err(|e| GpError::Parse(format!("{key}: {e}")))?;
        if parts.len() != 3 {
            return Err(GpError::Parse(format!("{key}: expected 3 values")));
        }
        Ok(Vector3::new(parts[0], parts[1], parts[2]))
    };
    let scalar = |key: &str| -> Result<f64, GpError> {
        meta.get(key)
            .ok_or_else(|| GpError::Parse(format!("missing {key}")))?
            .parse()
            .map_err(|e| GpError::Parse(format!("{key}: {e}")))
    };
    let hyper = GpHyperparameters {
        sigma_lin: scalar("sigma_lin")?,
        sigma_se: scalar("sigma_se")?,
        length_scale: scalar("length_scale")?,
    };
    if rows.len() < 3 {
        return Err(GpError::Parse("fewer than three coefficient rows".into()));
    }
    let modes: Vec<[u32; 3]> = rows[3..].iter().map(|r| r.0).collect();
    // keep the file order, which export_map writes already sorted
    hyper.validate()?;
    let domain = GpDomain::from_parts(vec3("half_lengths")?, vec3("center")?, modes, hyper);
    let eta = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let var = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
    Ok((domain, eta, var))
}

/// Rasterise the field on a horizontal grid at height `z`, as CSV `x,y,z,bx,by,bz`.
pub fn export_field_grid<W: Write>(
    mut w: W,
    domain: &GpDomain,
    eta: &DVector<f64>,
    z: f64,
    step: f64,
) -> Result<(), GpError> {
    writeln!(w, "x,y,z,bx,by,bz")?;
    let lo = domain.center - domain.half_lengths;
    let nx = (2.0 * domain.half_lengths.x / step).floor() as usize;
    let ny = (2.0 * domain.half_lengths.y / step).floor() as usize;
    let mut line = String::new();
    for i in 0..=nx {
        for j in 0..=ny {
            let r = Vector3::new(lo.x + i as f64 * step, lo.y + j as f64 * step, z);
            let b = domain.evaluate_global_field(eta, &r);
            line.clear();
            let _ = write!(line, "{},{},{},{},{},{}", r.x, r.y, r.z, b.x, b.y, b.z);
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}
