//! Tightly coupled inertial-magnetic SLAM.
//!
//! One filter holds the INS states, the local field coefficients and the
//! global map weights. Most magnetometer frames update the local model as in
//! MAINS; every `switch_period`-th frame instead uses the fused model, where
//! the field at the array centre comes from the global map and the spatial
//! variation across the array from the local gradient.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::Serialize;

use crate::config::SystemConfig;
use crate::eskf::{BlockKind, Eskf, FilterState, Jacobian, MeasurementModel, NominalState};
use crate::frames::{ArrayGeometry, SensorFrame};
use crate::geom::{rotation_matrix, skew};
use crate::mag_global::GpDomain;
use crate::mag_local::{field_gradient, regressor, LocalFieldCoeffs, NUM_COEFFS};
use crate::mains::{
    block_diag, engine_options, initial_local_field, initial_navigation, stack_fields, trajectory_point, BaroModel,
    CompressedLocalModel, FrameClock, InsProcess, MainsError, PoseFixModel, UpdateCounts,
};
use crate::trajectory::TrajectoryPoint;

/// Global field at the array centre plus local gradient:
/// `y_i = Rᵀ ∇Ψ(p) η + grad(θ) r_i`.
///
/// Besides independent sensor noise, every sensor shares one centre-field
/// error of variance `centre_var` per axis: the first-order model leaves out
/// curvature, so its centre field is not exactly the map's field at `p`.
#[derive(Debug, Clone)]
pub struct FusedModel {
    positions: Vec<Vector3<f64>>,
    domain: GpDomain,
    noise_var: f64,
    centre_var: f64,
}

impl FusedModel {
    pub fn new(geometry: &ArrayGeometry, domain: &GpDomain, mag_noise: f64, centre_error: f64) -> Self {
        Self {
            positions: geometry.positions().to_vec(),
            domain: domain.clone(),
            noise_var: mag_noise * mag_noise,
            centre_var: centre_error * centre_error,
        }
    }

    /// Same predictions with the local term written as `(Φ(r) − Φ(0)) θ`.
    pub fn predict_expanded(&self, x: &NominalState) -> DVector<f64> {
        let (centre, theta) = self.centre_field(x);
        let phi0 = regressor(&Vector3::zeros());
        let fields: Vec<_> = self.positions.iter().map(|r| centre + (regressor(r) - phi0) * theta.0).collect();
        stack_fields(&fields)
    }

    fn centre_field(&self, x: &NominalState) -> (Vector3<f64>, LocalFieldCoeffs) {
        let p = x.vec3(BlockKind::Position);
        let r = rotation_matrix(&x.rotation(BlockKind::Attitude));
        let b = self.domain.evaluate_global_field(x.vector(BlockKind::GlobalField), &p);
        (r.transpose() * b, LocalFieldCoeffs::from_slice(x.vector(BlockKind::LocalField).as_slice()))
    }

    /// Jacobian blocks of the centre-field term: `(δp, δattitude, δη)`.
    fn centre_jacobian(&self, x: &NominalState) -> (Matrix3<f64>, Matrix3<f64>, DMatrix<f64>) {
        let p = x.vec3(BlockKind::Position);
        let r = rotation_matrix(&x.rotation(BlockKind::Attitude));
        let (reg, b, jac) = self.domain.field_regressor_with_jacobian(&p, x.vector(BlockKind::GlobalField));
        let rt = r.transpose();
        (rt * jac, skew(&(rt * b)), DMatrix::from_column_slice(3, 3, rt.as_slice()) * reg)
    }

    pub fn in_domain(&self, x: &NominalState) -> bool {
        self.domain.contains(&x.vec3(BlockKind::Position))
    }
}

impl MeasurementModel for FusedModel {
    fn name(&self) -> &'static str {
        "array-fused"
    }
    fn dim(&self) -> usize {
        3 * self.positions.len()
    }
    fn predict(&self, x: &NominalState) -> DVector<f64> {
        let (centre, theta) = self.centre_field(x);
        let grad = field_gradient(&theta);
        let fields: Vec<_> = self.positions.iter().map(|r| centre + grad * r).collect();
        stack_fields(&fields)
    }
    fn jacobian(&self, x: &NominalState) -> Jacobian {
        let n = self.positions.len();
        let (dp, dq, de) = self.centre_jacobian(x);
        let mut hp = DMatrix::zeros(3 * n, 3);
        let mut hq = DMatrix::zeros(3 * n, 3);
        let mut ht = DMatrix::zeros(3 * n, NUM_COEFFS);
        let mut he = DMatrix::zeros(3 * n, self.domain.dim());
        let phi0 = regressor(&Vector3::zeros());
        for (i, r) in self.positions.iter().enumerate() {
            hp.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&dp);
            hq.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&dq);
            ht.fixed_view_mut::<3, NUM_COEFFS>(3 * i, 0).copy_from(&(regressor(r) - phi0));
            he.rows_mut(3 * i, 3).copy_from(&de);
        }
        Jacobian::new(3 * n)
            .with_block(x.offset(BlockKind::Position), hp)
            .with_block(x.offset(BlockKind::Attitude), hq)
            .with_block(x.offset(BlockKind::LocalField), ht)
            .with_block(x.offset(BlockKind::GlobalField), he)
    }
    fn noise(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| {
            let shared = if i % 3 == j % 3 { self.centre_var } else { 0.0 };
            shared + if i == j { self.noise_var } else { 0.0 }
        })
    }
}

/// The fused measurement reduced to eight numbers.
///
/// Every sensor reads `c + grad(θ) r_i = Φ(r_i) [c; θ_grad]`, so the
/// least-squares estimate of `[c; θ_grad]` is a sufficient statistic, exactly
/// as for the local model. Its first three entries are compared with the
/// global map, the other five with the gradient part of θ. The shared
/// centre-field error lies in the span of the regressor, so it simply adds to
/// the covariance of the first three entries.
#[derive(Debug, Clone)]
pub struct CompressedFusedModel {
    fused: FusedModel,
    cov: DMatrix<f64>,
}

impl CompressedFusedModel {
    pub fn new(geometry: &ArrayGeometry, domain: &GpDomain, mag_noise: f64, centre_error: f64) -> Self {
        let mut cov = CompressedLocalModel::new(geometry, mag_noise).noise();
        for i in 0..3 {
            cov[(i, i)] += centre_error * centre_error;
        }
        Self { fused: FusedModel::new(geometry, domain, mag_noise, centre_error), cov }
    }
}

impl MeasurementModel for CompressedFusedModel {
    fn name(&self) -> &'static str {
        "array-fused"
    }
    fn dim(&self) -> usize {
        NUM_COEFFS
    }
    fn predict(&self, x: &NominalState) -> DVector<f64> {
        let (centre, theta) = self.fused.centre_field(x);
        let mut y = DVector::from_column_slice(theta.0.as_slice());
        y.fixed_rows_mut::<3>(0).copy_from(&centre);
        y
    }
    fn jacobian(&self, x: &NominalState) -> Jacobian {
        let (dp, dq, de) = self.fused.centre_jacobian(x);
        let pad = |m: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(NUM_COEFFS, m.ncols());
            out.rows_mut(0, 3).copy_from(m);
            out
        };
        let mut ht = DMatrix::zeros(NUM_COEFFS, NUM_COEFFS);
        for i in 3..NUM_COEFFS {
            ht[(i, i)] = 1.0;
        }
        Jacobian::new(NUM_COEFFS)
            .with_block(x.offset(BlockKind::Position), pad(&DMatrix::from_column_slice(3, 3, dp.as_slice())))
            .with_block(x.offset(BlockKind::Attitude), pad(&DMatrix::from_column_slice(3, 3, dq.as_slice())))
            .with_block(x.offset(BlockKind::LocalField), ht)
            .with_block(x.offset(BlockKind::GlobalField), pad(&de))
    }
    fn noise(&self) -> DMatrix<f64> {
        self.cov.clone()
    }
}

/// Position correction applied by the measurement updates of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpSample {
    pub t: f64,
    pub fused: bool,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct JumpSummary {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

impl JumpSummary {
    fn of(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self { count: n, median, mean: v.iter().sum::<f64>() / n as f64, max: v[n - 1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct JumpStats {
    pub fused: JumpSummary,
    pub ordinary: JumpSummary,
}

/// Distribution of per-epoch position corrections, split by epoch class.
pub fn position_jump_metric(samples: &[JumpSample]) -> JumpStats {
    let pick = |fused: bool| samples.iter().filter(|s| s.fused == fused).map(|s| s.magnitude).collect::<Vec<_>>();
    JumpStats { fused: JumpSummary::of(pick(true)), ordinary: JumpSummary::of(pick(false)) }
}

#[derive(Debug)]
pub struct TightOutput {
    pub trajectory: Vec<TrajectoryPoint>,
    pub jumps: Vec<JumpSample>,
    pub final_state: FilterState,
    pub counts: UpdateCounts,
    pub out_of_domain_updates: usize,
}

/// The tightly coupled filter.
#[derive(Debug)]
pub struct TightFilter {
    engine: Eskf,
    pub state: FilterState,
    process: InsProcess,
    local: CompressedLocalModel,
    fused: CompressedFusedModel,
    baro: BaroModel,
    pose: PoseFixModel,
    config: SystemConfig,
    clock: FrameClock,
    mag_frames: usize,
    pub counts: UpdateCounts,
    pub out_of_domain_updates: usize,
}

/// Result of processing one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochInfo {
    pub fused: bool,
    pub correction: f64,
}

impl TightFilter {
    pub fn new(frames: &[SensorFrame], geometry: &ArrayGeometry, domain: &GpDomain, config: &SystemConfig) -> Result<Self, MainsError> {
        let (nav, p_nav) = initial_navigation(frames, config)?;
        let (theta, p_theta) = initial_local_field(frames, geometry, config);
        let nominal = nav
            .to_nominal()
            .with_vector(BlockKind::LocalField, DVector::from_column_slice(theta.0.as_slice()))
            .with_vector(BlockKind::GlobalField, DVector::zeros(domain.dim()));
        let p_eta = DMatrix::from_diagonal(&domain.prior_covariance());
        let t0 = frames[0].t;
        let state = FilterState::new(nominal, block_diag(&[&p_nav, &p_theta, &p_eta]), t0)?;
        let n = &config.noise;
        Ok(Self {
            engine: Eskf::new(engine_options(config)),
            state,
            process: InsProcess::new(config.filter.gravity, *n),
            local: CompressedLocalModel::new(geometry, n.mag_noise),
            fused: CompressedFusedModel::new(geometry, domain, n.mag_noise, n.centre_field_error),
            baro: BaroModel { noise_var: n.baro_noise * n.baro_noise },
            pose: PoseFixModel { position_var: n.pose_fix_position_std.powi(2), attitude_var: n.pose_fix_attitude_std.powi(2) },
            config: *config,
            clock: FrameClock::new(t0, config.filter.max_gap),
            mag_frames: 0,
            counts: UpdateCounts::default(),
            out_of_domain_updates: 0,
        })
    }

    pub fn process(&mut self, frame: &SensorFrame) -> Result<EpochInfo, MainsError> {
        if let Some((u, dt)) = self.clock.advance(frame)? {
            self.engine.propagate(&mut self.state, &self.process, &u, dt)?;
            self.counts.propagations += 1;
        }
        self.state.time = frame.t;
        let before = self.state.nominal.vec3(BlockKind::Position);
        let f = self.config.filter;
        let mut fused = false;
        if f.use_pose_fix {
            if let Some(fix) = &frame.pose_fix {
                let rec = self.engine.update(&mut self.state, &self.pose, &PoseFixModel::measurement(fix))?;
                if self.counts.note(rec.status) {
                    self.counts.pose_fix += 1;
                }
            }
        }
        if let Some(mag) = &frame.mag {
            self.mag_frames += 1;
            fused = self.mag_frames % f.switch_period.max(1) == 0;
            if f.use_mag {
                let y = self.local.compress(mag);
                if fused {
                    if !self.fused.fused.in_domain(&self.state.nominal) {
                        self.out_of_domain_updates += 1;
                        log::warn!("array centre outside the map domain at t = {}", frame.t);
                    }
                    let rec = self.engine.update(&mut self.state, &self.fused, &y)?;
                    if self.counts.note(rec.status) {
                        self.counts.fused += 1;
                    }
                } else {
                    let rec = self.engine.update(&mut self.state, &self.local, &y)?;
                    if self.counts.note(rec.status) {
                        self.counts.mag += 1;
                    }
                }
            }
        }
        if f.use_baro {
            if let Some(alt) = frame.baro {
                let rec = self.engine.update(&mut self.state, &self.baro, &DVector::from_element(1, alt))?;
                if self.counts.note(rec.status) {
                    self.counts.baro += 1;
                }
            }
        }
        let correction = (self.state.nominal.vec3(BlockKind::Position) - before).norm();
        Ok(EpochInfo { fused, correction })
    }
}

/// Run the tight filter over a stream; one trajectory point per frame.
pub fn run_tight_slam(frames: &[SensorFrame], geometry: &ArrayGeometry, domain: &GpDomain, config: &SystemConfig) -> Result<TightOutput, MainsError> {
    let mut filter = TightFilter::new(frames, geometry, domain, config)?;
    let mut trajectory = Vec::with_capacity(frames.len());
    let mut jumps = Vec::new();
    for frame in frames {
        let info = filter.process(frame)?;
        if frame.mag.is_some() {
            jumps.push(JumpSample { t: frame.t, fused: info.fused, magnitude: info.correction });
        }
        trajectory.push(trajectory_point(&filter.state, info.fused));
    }
    Ok(TightOutput {
        trajectory,
        jumps,
        final_state: filter.state,
        counts: filter.counts,
        out_of_domain_updates: filter.out_of_domain_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eskf::{numerical_measurement_jacobian, relative_difference, ProcessModel};
    use crate::geom::exp_map;
    use crate::mag_global::GpHyperparameters;
    use crate::mains::NavState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn domain() -> GpDomain {
        GpDomain::new(Vector3::new(3.0, 3.0, 1.5), Vector3::zeros(), 120, GpHyperparameters::default()).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, d: &GpDomain) -> NominalState {
        let nav = NavState { p: v3(rng, 1.0), v: v3(rng, 1.0), q: exp_map(&v3(rng, 2.0)), ba: v3(rng, 0.1), bg: v3(rng, 0.01) };
        let theta = DVector::from_fn(NUM_COEFFS, |_, _| rng.random_range(-20.0..20.0));
        let prior = d.prior_covariance();
        let eta = prior.map(|v| v.sqrt() * rng.random_range(-1.5..1.5));
        nav.to_nominal().with_vector(BlockKind::LocalField, theta).with_vector(BlockKind::GlobalField, eta)
    }

    #[test]
    fn fused_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = domain();
        let g = ArrayGeometry::default_board();
        let models: Vec<Box<dyn MeasurementModel>> =
            vec![Box::new(FusedModel::new(&g, &d, 0.5, 0.4)), Box::new(CompressedFusedModel::new(&g, &d, 0.5, 0.4))];
        for m in &models {
            for _ in 0..20 {
                let x = random_state(&mut rng, &d);
                let an = m.jacobian(&x).to_dense(x.dim());
                let fd = numerical_measurement_jacobian(m.as_ref(), &x, 1e-6);
                let err = relative_difference(&an, &fd);
                assert!(err < 1e-4, "{}: {err}", m.name());
            }
        }
    }

    #[test]
    fn dual_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = domain();
        let m = FusedModel::new(&ArrayGeometry::default_board(), &d, 0.5, 0.4);
        for _ in 0..50 {
            let x = random_state(&mut rng, &d);
            let a = m.predict(&x);
            let b = m.predict_expanded(&x);
            assert!((a - &b).amax() <= 1e-12 * b.amax().max(1.0));
        }
    }

    #[test]
    fn centre_sensor_and_theta_only_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = domain();
        let geom = ArrayGeometry::new(vec![Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.0, 0.1, 0.02)]).unwrap();
        let m = FusedModel::new(&geom, &d, 0.5, 0.4);
        let mut x = random_state(&mut rng, &d);
        let y = m.predict(&x);
        let (p, q) = (x.vec3(BlockKind::Position), x.rotation(BlockKind::Attitude));
        let global = rotation_matrix(&q).transpose() * d.evaluate_global_field(x.vector(BlockKind::GlobalField), &p);
        assert_eq!(y.fixed_rows::<3>(0).into_owned(), global);
        x.vector_mut(BlockKind::GlobalField).fill(0.0);
        let y = m.predict(&x);
        let grad = field_gradient(&LocalFieldCoeffs::from_slice(x.vector(BlockKind::LocalField).as_slice()));
        for (i, r) in geom.positions().iter().enumerate() {
            assert!((y.fixed_rows::<3>(3 * i) - grad * r).norm() < 1e-12);
        }
    }

    #[test]
    fn compressed_fused_update_equals_full_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = domain();
        let g = ArrayGeometry::default_board();
        let full = FusedModel::new(&g, &d, 0.5, 0.4);
        let comp = CompressedFusedModel::new(&g, &d, 0.5, 0.4);
        let local = CompressedLocalModel::new(&g, 0.5);
        let x = random_state(&mut rng, &d);
        let a = DMatrix::from_fn(x.dim(), x.dim(), |_, _| rng.random_range(-0.1..0.1));
        let p = &a * a.transpose() + DMatrix::identity(x.dim(), x.dim()) * 0.01;
        let fields: Vec<_> = (0..g.len()).map(|_| v3(&mut rng, 40.0)).collect();
        let mut s1 = FilterState::new(x.clone(), p.clone(), 0.0).unwrap();
        let mut s2 = FilterState::new(x, p, 0.0).unwrap();
        let mut eng = Eskf::default();
        eng.update(&mut s1, &full, &stack_fields(&fields)).unwrap();
        eng.update(&mut s2, &comp, &local.compress(&fields)).unwrap();
        assert!(s1.nominal.difference(&s2.nominal).amax() < 1e-7);
        assert!((&s1.cov - &s2.cov).amax() < 1e-7);
    }

    #[test]
    fn global_block_untouched_by_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = domain();
        let x = random_state(&mut rng, &d);
        let a = DMatrix::from_fn(x.dim(), x.dim(), |_, _| rng.random_range(-0.1..0.1));
        let p = &a * a.transpose();
        let mut s = FilterState::new(x, p, 0.0).unwrap();
        let r = s.nominal.range(BlockKind::GlobalField).unwrap();
        let before = s.cov.view((r.start, r.start), (r.len(), r.len())).into_owned();
        let eta = s.nominal.vector(BlockKind::GlobalField).clone();
        let u = crate::frames::ImuSample { t: 0.0, acc: v3(&mut rng, 10.0), gyro: v3(&mut rng, 1.0) };
        let model = InsProcess::new(9.81, Default::default());
        assert_eq!(model.transition(&mut s.nominal.clone(), &u, 0.01).f.nrows(), 23);
        Eskf::default().propagate(&mut s, &model, &u, 0.01).unwrap();
        assert_eq!(s.cov.view((r.start, r.start), (r.len(), r.len())).into_owned(), before);
        assert_eq!(s.nominal.vector(BlockKind::GlobalField), &eta);
    }

    #[test]
    fn fused_update_does_not_increase_map_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = domain();
        let g = ArrayGeometry::default_board();
        let comp = CompressedFusedModel::new(&g, &d, 0.5, 0.4);
        let local = CompressedLocalModel::new(&g, 0.5);
        let x = random_state(&mut rng, &d);
        let a = DMatrix::from_fn(x.dim(), x.dim(), |_, _| rng.random_range(-0.1..0.1));
        let mut p = &a * a.transpose() + DMatrix::identity(x.dim(), x.dim()) * 0.01;
        let r = x.range(BlockKind::GlobalField).unwrap();
        for i in r.clone() {
            p[(i, i)] += d.prior_covariance()[i - r.start];
        }
        let mut s = FilterState::new(x, p, 0.0).unwrap();
        let before = s.cov.view((r.start, r.start), (r.len(), r.len())).into_owned();
        let fields: Vec<_> = (0..g.len()).map(|_| v3(&mut rng, 40.0)).collect();
        Eskf::default().update(&mut s, &comp, &local.compress(&fields)).unwrap();
        let after = s.cov.view((r.start, r.start), (r.len(), r.len())).into_owned();
        let diff = &before - &after;
        let eig = diff.symmetric_eigenvalues();
        assert!(eig.min() >= -1e-9 * before.norm());
    }

    #[test]
    fn jump_metric_cases() {
        let zero: Vec<_> = (0..10).map(|k| JumpSample { t: k as f64, fused: k % 3 == 0, magnitude: 0.0 }).collect();
        let s = position_jump_metric(&zero);
        assert_eq!(s.fused.median, 0.0);
        assert_eq!(s.ordinary.max, 0.0);
        let mixed = vec![
            JumpSample { t: 0.0, fused: true, magnitude: 0.3 },
            JumpSample { t: 1.0, fused: false, magnitude: 0.1 },
            JumpSample { t: 2.0, fused: false, magnitude: 0.2 },
        ];
        let s = position_jump_metric(&mixed);
        assert_eq!(s.fused.count, 1);
        assert!((s.ordinary.median - 0.15).abs() < 1e-15);
    }
}
