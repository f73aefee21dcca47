//! Loosely coupled inertial-magnetic SLAM.
//!
//! A MAINS front end turns raw IMU and array data into odometry increments.
//! This back end dead-reckons on those increments and corrects pose and map
//! with array and barometer measurements against the global field model.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::config::SystemConfig;
use crate::eskf::{BlockKind, Eskf, FilterState, Jacobian, MeasurementModel, NominalState, ProcessModel, Transition};
use crate::frames::{ArrayGeometry, SensorFrame};
use crate::geom::{quat_multiply, rotation_matrix, skew, Quat};
use crate::mag_global::GpDomain;
use crate::mains::{
    block_diag, engine_options, stack_fields, trajectory_point, BaroModel, MainsError, OdometryIncrement,
    PoseFixModel, UpdateCounts,
};
use crate::trajectory::TrajectoryPoint;

/// Pose dead reckoning on odometry increments; the map is static.
#[derive(Debug, Clone, Copy, Default)]
pub struct OdometryProcess;

impl ProcessModel for OdometryProcess {
    type Input = OdometryIncrement;

    fn transition(&self, x: &mut NominalState, odo: &OdometryIncrement, _dt: f64) -> Transition {
        debug_assert_eq!(x.offset(BlockKind::Position), 0);
        debug_assert_eq!(x.offset(BlockKind::Attitude), 3);
        let p = x.vec3(BlockKind::Position) + odo.delta_p;
        let q = quat_multiply(&x.rotation(BlockKind::Attitude), &odo.delta_q);
        x.set_vec3(BlockKind::Position, &p);
        x.set_rotation(BlockKind::Attitude, q);
        let mut f = DMatrix::identity(6, 6);
        f.fixed_view_mut::<3, 3>(3, 3).copy_from(&rotation_matrix(&odo.delta_q).transpose());
        let cov = DMatrix::from_iterator(6, 6, odo.cov.iter().copied());
        let q = &f * cov * f.transpose();
        Transition { f, q }
    }
}

/// Initial SLAM state: pose, and map weights at zero with the prior covariance.
pub fn slam_state(p: Vector3<f64>, q: Quat, pose_cov: &DMatrix<f64>, domain: &GpDomain, t: f64) -> FilterState {
    let nominal = NominalState::new()
        .with_vec3(BlockKind::Position, p)
        .with_rotation(BlockKind::Attitude, q)
        .with_vector(BlockKind::GlobalField, DVector::zeros(domain.dim()));
    let cov = block_diag(&[pose_cov, &DMatrix::from_diagonal(&domain.prior_covariance())]);
    FilterState::new(nominal, cov, t).expect("consistent layout")
}

/// Every array sensor against the global map at its own position:
/// `y_i = Rᵀ ∇Ψ(p + R r_i) η`.
#[derive(Debug, Clone)]
pub struct ArraySlamModel {
    positions: Vec<Vector3<f64>>,
    domain: GpDomain,
    noise_var: f64,
}

impl ArraySlamModel {
    pub fn new(geometry: &ArrayGeometry, domain: &GpDomain, mag_noise: f64) -> Self {
        Self { positions: geometry.positions().to_vec(), domain: domain.clone(), noise_var: mag_noise * mag_noise }
    }

    /// Number of sensors currently outside the map domain.
    pub fn out_of_domain(&self, x: &NominalState) -> usize {
        let (p, r) = (x.vec3(BlockKind::Position), rotation_matrix(&x.rotation(BlockKind::Attitude)));
        self.positions.iter().filter(|ri| !self.domain.contains(&(p + r * *ri))).count()
    }
}

impl MeasurementModel for ArraySlamModel {
    fn name(&self) -> &'static str {
        "array-slam"
    }
    fn dim(&self) -> usize {
        3 * self.positions.len()
    }
    fn predict(&self, x: &NominalState) -> DVector<f64> {
        let (p, r) = (x.vec3(BlockKind::Position), rotation_matrix(&x.rotation(BlockKind::Attitude)));
        let eta = x.vector(BlockKind::GlobalField);
        let fields: Vec<_> = self.positions.iter().map(|ri| r.transpose() * self.domain.evaluate_global_field(eta, &(p + r * ri))).collect();
        stack_fields(&fields)
    }
    fn jacobian(&self, x: &NominalState) -> Jacobian {
        let (p, r) = (x.vec3(BlockKind::Position), rotation_matrix(&x.rotation(BlockKind::Attitude)));
        let eta = x.vector(BlockKind::GlobalField);
        let n = self.positions.len();
        let mut hp = DMatrix::zeros(3 * n, 3);
        let mut hq = DMatrix::zeros(3 * n, 3);
        let mut he = DMatrix::zeros(3 * n, self.domain.dim());
        let rt = r.transpose();
        for (i, ri) in self.positions.iter().enumerate() {
            let (reg, b, jac) = self.domain.field_regressor_with_jacobian(&(p + r * ri), eta);
            let dp: Matrix3<f64> = rt * jac;
            hp.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&dp);
            hq.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&(skew(&(rt * b)) - dp * r * skew(ri)));
            he.rows_mut(3 * i, 3).copy_from(&(rt * reg));
        }
        Jacobian::new(3 * n)
            .with_block(x.offset(BlockKind::Position), hp)
            .with_block(x.offset(BlockKind::Attitude), hq)
            .with_block(x.offset(BlockKind::GlobalField), he)
    }
    fn noise(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) * self.noise_var
    }
}

/// Index of the frame nearest to `t` satisfying `pred`, searching at most
/// `window` seconds away.
pub fn nearest_frame(frames: &[SensorFrame], t: f64, window: f64, pred: impl Fn(&SensorFrame) -> bool) -> Option<usize> {
    let start = frames.partition_point(|f| f.t < t - window);
    frames[start..]
        .iter()
        .enumerate()
        .take_while(|(_, f)| f.t <= t + window)
        .filter(|(_, f)| pred(f))
        .min_by(|a, b| (a.1.t - t).abs().total_cmp(&(b.1.t - t).abs()))
        .map(|(i, _)| start + i)
}

#[derive(Debug)]
pub struct SlamOutput {
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_state: FilterState,
    pub counts: UpdateCounts,
    /// Array updates with at least one sensor outside the map domain.
    pub out_of_domain_updates: usize,
}

/// Back end over a given odometry stream, starting from `initial`.
/// Measurements are taken from the frames nearest each odometry epoch.
pub fn run_loose_slam(
    odometry: &[OdometryIncrement],
    frames: &[SensorFrame],
    geometry: &ArrayGeometry,
    domain: &GpDomain,
    config: &SystemConfig,
    mut state: FilterState,
) -> Result<SlamOutput, MainsError> {
    let mut engine = Eskf::new(engine_options(config));
    let n = &config.noise;
    let array = ArraySlamModel::new(geometry, domain, n.mag_noise);
    let baro = BaroModel { noise_var: n.baro_noise * n.baro_noise };
    let pose = PoseFixModel { position_var: n.pose_fix_position_std.powi(2), attitude_var: n.pose_fix_attitude_std.powi(2) };
    let f = &config.filter;
    let mut counts = UpdateCounts::default();
    let mut ood = 0;
    let mut trajectory = vec![trajectory_point(&state, false)];
    for odo in odometry {
        engine.propagate(&mut state, &OdometryProcess, odo, odo.t_j - odo.t_i)?;
        state.time = odo.t_j;
        counts.propagations += 1;
        let t = odo.t_j;
        if f.use_pose_fix {
            if let Some(i) = nearest_frame(frames, t, 0.005, |fr| fr.pose_fix.is_some()) {
                let y = PoseFixModel::measurement(frames[i].pose_fix.as_ref().expect("filtered"));
                if counts.note(engine.update(&mut state, &pose, &y)?.status) {
                    counts.pose_fix += 1;
                }
            }
        }
        if f.use_mag {
            if let Some(i) = nearest_frame(frames, t, 0.05, |fr| fr.mag.is_some()) {
                if array.out_of_domain(&state.nominal) > 0 {
                    ood += 1;
                    log::warn!("array partly outside the map domain at t = {t}");
                }
                let y = stack_fields(frames[i].mag.as_ref().expect("filtered"));
                if counts.note(engine.update(&mut state, &array, &y)?.status) {
                    counts.mag += 1;
                }
            }
        }
        if f.use_baro {
            if let Some(i) = nearest_frame(frames, t, 0.05, |fr| fr.baro.is_some()) {
                let y = DVector::from_element(1, frames[i].baro.expect("filtered"));
                if counts.note(engine.update(&mut state, &baro, &y)?.status) {
                    counts.baro += 1;
                }
            }
        }
        trajectory.push(trajectory_point(&state, false));
    }
    Ok(SlamOutput { trajectory, final_state: state, counts, out_of_domain_updates: ood })
}

/// Complete loosely coupled pipeline: MAINS odometry, then the SLAM back end
/// initialized from the MAINS pose at the first clone epoch.
pub fn run_loose(frames: &[SensorFrame], geometry: &ArrayGeometry, domain: &GpDomain, config: &SystemConfig) -> Result<SlamOutput, MainsError> {
    let mut front = crate::mains::MainsFilter::new(frames, geometry, config, true)?;
    let s0 = &front.state;
    let idx: Vec<usize> = [BlockKind::Position, BlockKind::Attitude]
        .iter()
        .flat_map(|k| s0.nominal.range(*k).expect("pose blocks"))
        .collect();
    let pose_cov = s0.cov.select_rows(&idx).select_columns(&idx);
    let start = slam_state(s0.nominal.vec3(BlockKind::Position), s0.nominal.rotation(BlockKind::Attitude), &pose_cov, domain, s0.time);
    let mut odometry = Vec::new();
    for frame in frames {
        if let Some(inc) = front.process(frame)? {
            odometry.push(inc);
        }
    }
    let mut out = run_loose_slam(&odometry, frames, geometry, domain, config, start)?;
    out.counts.propagations = front.counts.propagations;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eskf::{numerical_measurement_jacobian, numerical_process_jacobian, relative_difference};
    use crate::geom::{error_between, exp_map};
    use crate::mag_global::GpHyperparameters;
    use nalgebra::Matrix6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn domain() -> GpDomain {
        GpDomain::new(Vector3::new(3.0, 3.0, 1.5), Vector3::zeros(), 120, GpHyperparameters::default()).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, d: &GpDomain) -> FilterState {
        let mut s = slam_state(v3(rng, 1.0), exp_map(&v3(rng, 2.0)), &DMatrix::identity(6, 6), d, 0.0);
        let prior = d.prior_covariance();
        *s.nominal.vector_mut(BlockKind::GlobalField) = prior.map(|v| v.sqrt() * rng.random_range(-1.5..1.5));
        s
    }

    #[test]
    fn identity_increment_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = domain();
        let mut s = random_state(&mut rng, &d);
        let before = s.clone();
        Eskf::default().propagate(&mut s, &OdometryProcess, &OdometryIncrement::identity(0, 0.0), 0.2).unwrap();
        assert_eq!(s.nominal, before.nominal);
        assert!((&s.cov - &before.cov).amax() < 1e-15);
    }

    #[test]
    fn pure_translation_moves_position_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = domain();
        let mut s = random_state(&mut rng, &d);
        let before = s.clone();
        let mut inc = OdometryIncrement::identity(0, 0.0);
        inc.delta_p = Vector3::new(0.3, -0.1, 0.05);
        Eskf::default().propagate(&mut s, &OdometryProcess, &inc, 0.2).unwrap();
        assert_eq!(s.nominal.vec3(BlockKind::Position), before.nominal.vec3(BlockKind::Position) + inc.delta_p);
        assert_eq!(s.nominal.rotation(BlockKind::Attitude), before.nominal.rotation(BlockKind::Attitude));
    }

    #[test]
    fn process_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = domain();
        for _ in 0..20 {
            let s = random_state(&mut rng, &d);
            let mut inc = OdometryIncrement::identity(0, 0.0);
            inc.delta_p = v3(&mut rng, 1.0);
            inc.delta_q = exp_map(&v3(&mut rng, 1.0));
            let mut tmp = s.nominal.clone();
            let an = OdometryProcess.transition(&mut tmp, &inc, 0.2).f;
            let fd = numerical_process_jacobian(&OdometryProcess, &s.nominal, &inc, 0.2, 1e-6);
            assert!(relative_difference(&an, &fd) < 1e-4);
        }
    }

    #[test]
    fn process_noise_is_odometry_covariance_in_body_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inc = OdometryIncrement::identity(0, 0.0);
        inc.delta_q = exp_map(&v3(&mut rng, 1.0));
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        inc.cov = a * a.transpose();
        let mut x = random_state(&mut rng, &domain()).nominal;
        let q = OdometryProcess.transition(&mut x, &inc, 0.2).q;
        let rt = rotation_matrix(&inc.delta_q).transpose();
        let expect = rt * inc.cov.fixed_view::<3, 3>(3, 3) * rt.transpose();
        assert!((q.view((3, 3), (3, 3)) - expect).amax() < 1e-12);
        assert!((q.view((0, 0), (3, 3)) - inc.cov.fixed_view::<3, 3>(0, 0)).amax() < 1e-12);
    }

    #[test]
    fn array_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = domain();
        let model = ArraySlamModel::new(&ArrayGeometry::default_board(), &d, 0.5);
        for _ in 0..20 {
            let s = random_state(&mut rng, &d);
            let an = model.jacobian(&s.nominal).to_dense(s.dim());
            let fd = numerical_measurement_jacobian(&model, &s.nominal, 1e-6);
            let err = relative_difference(&an, &fd);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn single_centre_sensor_reduces_to_point_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = domain();
        let geom = ArrayGeometry::new(vec![Vector3::zeros(), Vector3::x() * 0.1, Vector3::y() * 0.1]).unwrap();
        let model = ArraySlamModel::new(&geom, &d, 0.5);
        let s = random_state(&mut rng, &d);
        let y = model.predict(&s.nominal);
        let (p, q) = (s.nominal.vec3(BlockKind::Position), s.nominal.rotation(BlockKind::Attitude));
        let point = rotation_matrix(&q).transpose() * d.evaluate_global_field(s.nominal.vector(BlockKind::GlobalField), &p);
        assert_eq!(y.fixed_rows::<3>(0).into_owned(), point);
    }

    #[test]
    fn linear_weights_give_uniform_rotated_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = domain();
        let model = ArraySlamModel::new(&ArrayGeometry::default_board(), &d, 0.5);
        let mut s = random_state(&mut rng, &d);
        let mut eta = DVector::zeros(d.dim());
        eta[0] = 10.0;
        eta[1] = -20.0;
        eta[2] = 30.0;
        *s.nominal.vector_mut(BlockKind::GlobalField) = eta;
        let expect = rotation_matrix(&s.nominal.rotation(BlockKind::Attitude)).transpose() * Vector3::new(10.0, -20.0, 30.0);
        let y = model.predict(&s.nominal);
        for i in 0..30 {
            assert!((y.fixed_rows::<3>(3 * i) - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn baro_prediction_and_null_update() {
        let d = domain();
        let mut s = slam_state(Vector3::new(1.0, 2.0, 3.0), Quat::identity(), &DMatrix::identity(6, 6), &d, 0.0);
        let m = BaroModel { noise_var: 0.01 };
        assert_eq!(m.predict(&s.nominal)[0], 3.0);
        Eskf::default().update(&mut s, &m, &DVector::from_element(1, 3.0)).unwrap();
        assert_eq!(s.nominal.vec3(BlockKind::Position).z, 3.0);
    }

    #[test]
    fn dead_reckoning_composes_increments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = domain();
        let s0 = slam_state(Vector3::zeros(), Quat::identity(), &(DMatrix::identity(6, 6) * 1e-4), &d, 0.0);
        let incs: Vec<_> = (0..50)
            .map(|k| {
                let mut inc = OdometryIncrement::identity(k, k as f64 * 0.2);
                inc.t_j = (k + 1) as f64 * 0.2;
                inc.delta_p = v3(&mut rng, 0.2);
                inc.delta_q = exp_map(&v3(&mut rng, 0.1));
                inc.cov = Matrix6::identity() * 1e-4;
                inc
            })
            .collect();
        let mut cfg = SystemConfig::default();
        cfg.filter.use_mag = false;
        cfg.filter.use_baro = false;
        cfg.filter.use_pose_fix = false;
        let out = run_loose_slam(&incs, &[], &ArrayGeometry::default_board(), &d, &cfg, s0).unwrap();
        let total = incs.iter().skip(1).fold(incs[0], |acc, i| acc.compose(i));
        let end = out.trajectory.last().unwrap();
        assert!((end.position - total.delta_p).norm() < 1e-9);
        assert!(error_between(&end.attitude, &total.delta_q).norm() < 1e-9);
        assert_eq!(out.trajectory.len(), 51);
    }
}
