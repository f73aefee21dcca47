//! Generic error-state extended Kalman filter.
//!
//! A filter instance declares an ordered list of state blocks. Euclidean blocks
//! are updated additively; attitude blocks are unit quaternions perturbed on the
//! local side (see [`crate::geom`]). The covariance lives on the tangent space,
//! one row per error-state dimension, in block order.
//!
//! Process models act on a leading prefix of the error state (the "active"
//! part); every later block has identity dynamics and no process noise. Layouts
//! therefore list dynamic blocks first. Measurement Jacobians are block-sparse.

use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::{error_between, error_inject, Quat};

#[derive(Debug, Error)]
pub enum EskfError {
    #[error("non-finite state after {0}")]
    NonFiniteState(&'static str),
    #[error("unknown state block {0:?}")]
    UnknownBlock(BlockKind),
    #[error("state block {0:?} already present")]
    DuplicateBlock(BlockKind),
    #[error("invalid time step {0}")]
    InvalidTimeStep(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("diagnostics: {0}")]
    Diagnostics(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BlockKind {
    Position,
    Velocity,
    Attitude,
    AccelBias,
    GyroBias,
    LocalField,
    GlobalField,
    PastPosition,
    PastAttitude,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Vector(DVector<f64>),
    Rotation(Quat),
}

impl BlockValue {
    pub fn tangent_dim(&self) -> usize {
        match self {
            BlockValue::Vector(v) => v.len(),
            BlockValue::Rotation(_) => 3,
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            BlockValue::Vector(v) => v.iter().all(|x| x.is_finite()),
            BlockValue::Rotation(q) => q.coords.iter().all(|x| x.is_finite()),
        }
    }
}

/// Nominal (full) state as an ordered list of typed blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NominalState {
    kinds: Vec<BlockKind>,
    values: Vec<BlockValue>,
    offsets: Vec<usize>,
    dim: usize,
}

impl NominalState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_block(mut self, kind: BlockKind, value: BlockValue) -> Self {
        self.push(kind, value).expect("duplicate block in layout");
        self
    }

    pub fn with_vec3(self, kind: BlockKind, v: Vector3<f64>) -> Self {
        self.with_block(kind, BlockValue::Vector(DVector::from_column_slice(v.as_slice())))
    }

    pub fn with_rotation(self, kind: BlockKind, q: Quat) -> Self {
        self.with_block(kind, BlockValue::Rotation(q))
    }

    pub fn with_vector(self, kind: BlockKind, v: DVector<f64>) -> Self {
        self.with_block(kind, BlockValue::Vector(v))
    }

    fn push(&mut self, kind: BlockKind, value: BlockValue) -> Result<(), EskfError> {
        if self.kinds.contains(&kind) {
            return Err(EskfError::DuplicateBlock(kind));
        }
        self.offsets.push(self.dim);
        self.dim += value.tangent_dim();
        self.kinds.push(kind);
        self.values.push(value);
        Ok(())
    }

    fn remove(&mut self, kind: BlockKind) -> Result<(Range<usize>, BlockValue), EskfError> {
        let idx = self.index(kind)?;
        let range = self.offsets[idx]..self.offsets[idx] + self.values[idx].tangent_dim();
        self.kinds.remove(idx);
        let value = self.values.remove(idx);
        self.offsets.remove(idx);
        let width = range.len();
        for o in self.offsets.iter_mut().skip(idx) {
            *o -= width;
        }
        self.dim -= width;
        Ok((range, value))
    }

    fn index(&self, kind: BlockKind) -> Result<usize, EskfError> {
        self.kinds.iter().position(|k| *k == kind).ok_or(EskfError::UnknownBlock(kind))
    }

    /// Tangent-space dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kinds(&self) -> &[BlockKind] {
        &self.kinds
    }

    pub fn has(&self, kind: BlockKind) -> bool {
        self.kinds.contains(&kind)
    }

    pub fn range(&self, kind: BlockKind) -> Result<Range<usize>, EskfError> {
        let i = self.index(kind)?;
        Ok(self.offsets[i]..self.offsets[i] + self.values[i].tangent_dim())
    }

    /// Offset of a block that the caller knows is present.
    pub fn offset(&self, kind: BlockKind) -> usize {
        self.range(kind).unwrap_or_else(|e| panic!("{e}")).start
    }

    pub fn value(&self, kind: BlockKind) -> Result<&BlockValue, EskfError> {
        Ok(&self.values[self.index(kind)?])
    }

    pub fn vector(&self, kind: BlockKind) -> &DVector<f64> {
        match self.value(kind) {
            Ok(BlockValue::Vector(v)) => v,
            _ => panic!("block {kind:?} is not a vector block of this state"),
        }
    }

    pub fn vector_mut(&mut self, kind: BlockKind) -> &mut DVector<f64> {
        let i = self.index(kind).unwrap_or_else(|e| panic!("{e}"));
        match &mut self.values[i] {
            BlockValue::Vector(v) => v,
            BlockValue::Rotation(_) => panic!("block {kind:?} is a rotation"),
        }
    }

    pub fn vec3(&self, kind: BlockKind) -> Vector3<f64> {
        let v = self.vector(kind);
        Vector3::new(v[0], v[1], v[2])
    }

    pub fn set_vec3(&mut self, kind: BlockKind, x: &Vector3<f64>) {
        self.vector_mut(kind).copy_from_slice(x.as_slice());
    }

    pub fn rotation(&self, kind: BlockKind) -> Quat {
        match self.value(kind) {
            Ok(BlockValue::Rotation(q)) => *q,
            _ => panic!("block {kind:?} is not a rotation block of this state"),
        }
    }

    pub fn set_rotation(&mut self, kind: BlockKind, q: Quat) {
        let i = self.index(kind).unwrap_or_else(|e| panic!("{e}"));
        self.values[i] = BlockValue::Rotation(q);
    }

    /// `self ⊞ dx`.
    pub fn inject(&mut self, dx: &DVector<f64>) {
        debug_assert_eq!(dx.len(), self.dim);
        for (value, &off) in self.values.iter_mut().zip(&self.offsets) {
            match value {
                BlockValue::Vector(v) => {
                    let n = v.len();
                    *v += dx.rows(off, n);
                }
                BlockValue::Rotation(q) => {
                    let d = Vector3::new(dx[off], dx[off + 1], dx[off + 2]);
                    *q = error_inject(q, &d);
                }
            }
        }
    }

    /// Error state `δ` with `reference ⊞ δ = self`.
    pub fn difference(&self, reference: &NominalState) -> DVector<f64> {
        assert_eq!(self.kinds, reference.kinds, "layouts differ");
        let mut out = DVector::zeros(self.dim);
        for ((a, b), &off) in self.values.iter().zip(&reference.values).zip(&self.offsets) {
            match (a, b) {
                (BlockValue::Vector(a), BlockValue::Vector(b)) => out.rows_mut(off, a.len()).copy_from(&(a - b)),
                (BlockValue::Rotation(a), BlockValue::Rotation(b)) => {
                    out.fixed_rows_mut::<3>(off).copy_from(&error_between(b, a))
                }
                _ => unreachable!("matching layouts"),
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(BlockValue::is_finite)
    }

    /// Short hex digest of the nominal values, for diagnostics.
    pub fn snapshot_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            match v {
                BlockValue::Vector(v) => v.iter().for_each(|x| h.update(x.to_le_bytes())),
                BlockValue::Rotation(q) => q.coords.iter().for_each(|x| h.update(x.to_le_bytes())),
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Nominal state, error covariance and time.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub nominal: NominalState,
    pub cov: DMatrix<f64>,
    pub time: f64,
}

impl FilterState {
    pub fn new(nominal: NominalState, cov: DMatrix<f64>, time: f64) -> Result<Self, EskfError> {
        if cov.nrows() != nominal.dim() || cov.ncols() != nominal.dim() {
            return Err(EskfError::Dimension(format!(
                "covariance {}x{} for tangent dimension {}",
                cov.nrows(),
                cov.ncols(),
                nominal.dim()
            )));
        }
        Ok(Self { nominal, cov, time })
    }

    pub fn dim(&self) -> usize {
        self.nominal.dim()
    }

    pub fn block_cov(&self, a: BlockKind, b: BlockKind) -> DMatrix<f64> {
        let ra = self.nominal.range(a).unwrap_or_else(|e| panic!("{e}"));
        let rb = self.nominal.range(b).unwrap_or_else(|e| panic!("{e}"));
        self.cov.view((ra.start, rb.start), (ra.len(), rb.len())).into_owned()
    }
}

/// Linearised transition of the active error-state prefix.
#[derive(Debug, Clone)]
pub struct Transition {
    /// `∂δx'/∂δx` over the leading `f.nrows()` error dimensions.
    pub f: DMatrix<f64>,
    /// Discrete process-noise covariance on the same prefix.
    pub q: DMatrix<f64>,
}

pub trait ProcessModel {
    type Input;

    /// Advance the nominal state in place over `dt` seconds and return the
    /// linearisation about the pre-step nominal state.
    fn transition(&self, nominal: &mut NominalState, input: &Self::Input, dt: f64) -> Transition;
}

/// Block-sparse measurement Jacobian: `(column offset, dense block)` pairs.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub rows: usize,
    pub blocks: Vec<(usize, DMatrix<f64>)>,
}

impl Jacobian {
    pub fn new(rows: usize) -> Self {
        Self { rows, blocks: Vec::new() }
    }

    pub fn with_block(mut self, offset: usize, block: DMatrix<f64>) -> Self {
        assert_eq!(block.nrows(), self.rows);
        self.blocks.push((offset, block));
        self
    }

    pub fn to_dense(&self, cols: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.rows, cols);
        for (off, b) in &self.blocks {
            let mut v = h.view_mut((0, *off), (b.nrows(), b.ncols()));
            v += b;
        }
        h
    }
}

pub trait MeasurementModel {
    fn name(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn predict(&self, x: &NominalState) -> DVector<f64>;

    /// Innovation of measurement `y`; Euclidean models use `y - predict(x)`.
    fn innovation(&self, x: &NominalState, y: &DVector<f64>) -> DVector<f64> {
        y - self.predict(x)
    }

    /// Jacobian of the prediction with respect to the error state.
    fn jacobian(&self, x: &NominalState) -> Jacobian;

    /// Measurement noise covariance.
    fn noise(&self) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UpdateStatus {
    Applied,
    /// Normalised innovation squared above the configured gate.
    Gated,
    /// Innovation covariance not positive definite or condition number above the limit.
    SingularInnovationCovariance,
}

/// Diagnostic record of one measurement update.
#[derive(Debug, Clone, Serialize)]
pub struct InnovationRecord {
    pub time: f64,
    pub model: &'static str,
    pub status: UpdateStatus,
    pub innovation: Vec<f64>,
    pub innovation_cov_diag: Vec<f64>,
    pub nis: f64,
    pub state_hash: String,
}

/// Line-delimited JSON sink for [`InnovationRecord`]s.
pub struct DiagnosticsSink {
    out: Box<dyn Write + Send>,
}

impl DiagnosticsSink {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { out }
    }

    pub fn record(&mut self, rec: &InnovationRecord) -> Result<(), EskfError> {
        serde_json::to_writer(&mut self.out, rec).map_err(std::io::Error::other)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

impl std::fmt::Debug for DiagnosticsSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DiagnosticsSink")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    pub joseph: bool,
    /// Chi-square gate on the normalised innovation squared; `None` disables gating.
    pub gate: Option<f64>,
    pub max_condition: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self { joseph: true, gate: None, max_condition: 1e12 }
    }
}

/// The filter engine: options plus an optional diagnostics stream.
#[derive(Debug, Default)]
pub struct Eskf {
    pub options: EngineOptions,
    diagnostics: Option<DiagnosticsSink>,
}

impl Eskf {
    pub fn new(options: EngineOptions) -> Self {
        Self { options, diagnostics: None }
    }

    pub fn with_diagnostics(mut self, sink: DiagnosticsSink) -> Self {
        self.diagnostics = Some(sink);
        self
    }

    /// Time update: advance the nominal state and propagate `P ← F P Fᵀ + Q`.
    pub fn propagate<M: ProcessModel>(
        &self,
        state: &mut FilterState,
        model: &M,
        input: &M::Input,
        dt: f64,
    ) -> Result<(), EskfError> {
        if dt == 0.0 {
            return Ok(());
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(EskfError::InvalidTimeStep(dt));
        }
        let tr = model.transition(&mut state.nominal, input, dt);
        if !state.nominal.is_finite() {
            return Err(EskfError::NonFiniteState("propagation"));
        }
        propagate_covariance(&mut state.cov, &tr.f, &tr.q);
        if state.cov.view((0, 0), (tr.f.nrows(), tr.f.nrows())).iter().any(|x| !x.is_finite()) {
            return Err(EskfError::NonFiniteState("covariance propagation"));
        }
        state.time += dt;
        Ok(())
    }

    /// Measurement update with error injection and reset.
    pub fn update<M: MeasurementModel + ?Sized>(
        &mut self,
        state: &mut FilterState,
        model: &M,
        y: &DVector<f64>,
    ) -> Result<InnovationRecord, EskfError> {
        let nu = model.innovation(&state.nominal, y);
        let jac = model.jacobian(&state.nominal);
        let rec = self.update_linearized(state, model.name(), &nu, &jac, &model.noise())?;
        Ok(rec)
    }

    /// Update from a precomputed innovation and Jacobian.
    pub fn update_linearized(
        &mut self,
        state: &mut FilterState,
        name: &'static str,
        innovation: &DVector<f64>,
        jac: &Jacobian,
        noise: &DMatrix<f64>,
    ) -> Result<InnovationRecord, EskfError> {
        let r = jac.rows;
        if innovation.len() != r || noise.nrows() != r || noise.ncols() != r {
            return Err(EskfError::Dimension(format!("{name}: {r} rows, innovation {}", innovation.len())));
        }
        if innovation.iter().any(|x| !x.is_finite()) {
            return Err(EskfError::NonFiniteState("innovation"));
        }
        let d = state.dim();
        let p = &mut state.cov;

        // HP (r × d) and S = H P Hᵀ + R
        let mut hp = DMatrix::zeros(r, d);
        for (off, b) in &jac.blocks {
            hp.gemm(1.0, b, &p.rows(*off, b.ncols()), 1.0);
        }
        let mut s = noise.clone();
        for (off, b) in &jac.blocks {
            s.gemm(1.0, &hp.columns(*off, b.ncols()), &b.transpose(), 1.0);
        }
        s = 0.5 * (&s + s.transpose());

        let mut rec = InnovationRecord {
            time: state.time,
            model: name,
            status: UpdateStatus::Applied,
            innovation: innovation.iter().copied().collect(),
            innovation_cov_diag: s.diagonal().iter().copied().collect(),
            nis: f64::NAN,
            state_hash: String::new(),
        };

        let eig = s.clone().symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
        let chol = if lo > 0.0 && hi / lo <= self.options.max_condition { s.clone().cholesky() } else { None };
        let Some(chol) = chol else {
            rec.status = UpdateStatus::SingularInnovationCovariance;
            rec.state_hash = state.nominal.snapshot_hash();
            log::warn!("{name}: innovation covariance ill-conditioned, update skipped");
            self.emit(&rec)?;
            return Ok(rec);
        };

        let s_inv_nu = chol.solve(innovation);
        rec.nis = innovation.dot(&s_inv_nu);
        if let Some(gate) = self.options.gate {
            if rec.nis > gate {
                rec.status = UpdateStatus::Gated;
                rec.state_hash = state.nominal.snapshot_hash();
                self.emit(&rec)?;
                return Ok(rec);
            }
        }

        // Kᵀ = S⁻¹ H P
        let kt = chol.solve(&hp);
        let dx = hp.tr_mul(&s_inv_nu);
        if self.options.joseph {
            // (I-KH) P (I-KH)ᵀ + K R Kᵀ = P - (A + Aᵀ), A = K (HP - S Kᵀ / 2),
            // valid for any gain K
            let m = &hp - 0.5 * (&s * &kt);
            let a = kt.tr_mul(&m);
            for j in 0..d {
                for i in 0..=j {
                    let v = p[(i, j)] - (a[(i, j)] + a[(j, i)]);
                    p[(i, j)] = v;
                    p[(j, i)] = v;
                }
            }
        } else {
            p.gemm_tr(-1.0, &kt, &hp, 1.0);
            symmetrize(p);
        }

        state.nominal.inject(&dx);
        if !state.nominal.is_finite() {
            return Err(EskfError::NonFiniteState("update"));
        }
        rec.state_hash = state.nominal.snapshot_hash();
        self.emit(&rec)?;
        Ok(rec)
    }

    fn emit(&mut self, rec: &InnovationRecord) -> Result<(), EskfError> {
        if let Some(sink) = self.diagnostics.as_mut() {
            sink.record(rec)?;
        }
        Ok(())
    }
}

fn propagate_covariance(p: &mut DMatrix<f64>, f: &DMatrix<f64>, q: &DMatrix<f64>) {
    let na = f.nrows();
    let d = p.nrows();
    let top = f * p.rows(0, na);
    p.rows_mut(0, na).copy_from(&top);
    let left = p.columns(0, na) * f.transpose();
    p.columns_mut(0, na).copy_from(&left);
    {
        let mut aa = p.view_mut((0, 0), (na, na));
        aa += q;
    }
    // restore exact symmetry of the touched blocks
    for i in 0..na {
        for j in (i + 1)..na {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
        for j in na..d {
            p[(j, i)] = p[(i, j)];
        }
    }
}

pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Append a copy of block `source` under the name `clone`. The clone's
/// covariance rows and columns duplicate those of the source, so the clone is
/// perfectly correlated with it.
pub fn augment_block(state: &mut FilterState, source: BlockKind, clone: BlockKind) -> Result<(), EskfError> {
    let src = state.nominal.range(source)?;
    let value = state.nominal.value(source)?.clone();
    state.nominal.push(clone, value)?;
    let d = state.cov.nrows();
    let w = src.len();
    let mut p = DMatrix::zeros(d + w, d + w);
    p.view_mut((0, 0), (d, d)).copy_from(&state.cov);
    p.view_mut((0, d), (d, w)).copy_from(&state.cov.columns(src.start, w));
    p.view_mut((d, 0), (w, d)).copy_from(&state.cov.rows(src.start, w));
    p.view_mut((d, d), (w, w)).copy_from(&state.cov.view((src.start, src.start), (w, w)));
    state.cov = p;
    Ok(())
}

/// Drop a block and its covariance rows and columns.
pub fn marginalize_block(state: &mut FilterState, kind: BlockKind) -> Result<(), EskfError> {
    let (range, _) = state.nominal.remove(kind)?;
    let keep: Vec<usize> = (0..state.cov.nrows()).filter(|i| !range.contains(i)).collect();
    state.cov = state.cov.select_rows(&keep).select_columns(&keep);
    Ok(())
}

/// Overwrite an existing clone block with the current value of `source`,
/// in place, including its covariance rows and columns.
pub fn reclone_block(state: &mut FilterState, source: BlockKind, clone: BlockKind) -> Result<(), EskfError> {
    let src = state.nominal.range(source)?;
    let dst = state.nominal.range(clone)?;
    if src.len() != dst.len() {
        return Err(EskfError::Dimension(format!("{source:?} and {clone:?} differ in size")));
    }
    let value = state.nominal.value(source)?.clone();
    let idx = state.nominal.index(clone)?;
    state.nominal.values[idx] = value;
    let w = src.len();
    let rows = state.cov.rows(src.start, w).into_owned();
    state.cov.rows_mut(dst.start, w).copy_from(&rows);
    let cols = state.cov.columns(src.start, w).into_owned();
    state.cov.columns_mut(dst.start, w).copy_from(&cols);
    Ok(())
}

/// Central-difference Jacobian of a measurement model on the error state.
pub fn numerical_measurement_jacobian<M: MeasurementModel + ?Sized>(model: &M, x: &NominalState, step: f64) -> DMatrix<f64> {
    let y0 = model.predict(x);
    let mut h = DMatrix::zeros(model.dim(), x.dim());
    for c in 0..x.dim() {
        let mut e = DVector::zeros(x.dim());
        e[c] = step;
        let mut plus = x.clone();
        plus.inject(&e);
        let mut minus = x.clone();
        minus.inject(&-e);
        // the prediction enters the innovation with a minus sign
        let col = (model.innovation(&minus, &y0) - model.innovation(&plus, &y0)) / (2.0 * step);
        h.set_column(c, &col);
    }
    h
}

/// Central-difference Jacobian of a process model over its active prefix.
pub fn numerical_process_jacobian<M: ProcessModel>(
    model: &M,
    x: &NominalState,
    input: &M::Input,
    dt: f64,
    step: f64,
) -> DMatrix<f64> {
    let mut base = x.clone();
    let na = model.transition(&mut base, input, dt).f.nrows();
    let mut f = DMatrix::zeros(na, na);
    for c in 0..na {
        let mut e = DVector::zeros(x.dim());
        e[c] = step;
        let mut plus = x.clone();
        plus.inject(&e);
        model.transition(&mut plus, input, dt);
        let mut minus = x.clone();
        minus.inject(&-e);
        model.transition(&mut minus, input, dt);
        let col = (plus.difference(&base) - minus.difference(&base)) / (2.0 * step);
        f.set_column(c, &col.rows(0, na));
    }
    f
}

/// Frobenius-norm relative difference `‖a - b‖ / ‖b‖`.
pub fn relative_difference(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let scale = numeric.norm().max(1e-300);
    (analytic - numeric).norm() / scale
}
