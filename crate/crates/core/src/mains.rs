//! Magnetic-field-aided inertial navigation.
//!
//! Strapdown INS in a z-up navigation frame, carried together with the local
//! field coefficients of the array. The local field is transported along with
//! the body between samples; a mismatch between the transported and the
//! measured field is what corrects velocity drift.
//!
//! Cloning the pose into a past-pose block lets the filter emit odometry
//! increments with a proper covariance.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Quaternion, SMatrix, Vector3};
use thiserror::Error;

use crate::config::{NoiseConfig, SystemConfig};
use crate::eskf::{
    augment_block, reclone_block, BlockKind, EngineOptions, Eskf, EskfError, FilterState, Jacobian,
    MeasurementModel, NominalState, ProcessModel, Transition, UpdateStatus,
};
use crate::frames::{ArrayGeometry, ImuSample, PoseFix, SensorFrame};
use crate::geom::{error_between, exp_map, from_euler, quat_multiply, right_jacobian, rotation_matrix, skew, Quat};
use crate::mag_local::{
    fit_least_squares, regressor, transport_coeffs, transport_jacobian_displacement, transport_jacobian_rotation,
    transport_matrix, LocalFieldCoeffs, NUM_COEFFS,
};
use crate::trajectory::TrajectoryPoint;

/// Tangent dimension of the INS part of the state.
pub const NAV_DIM: usize = 15;
const P: usize = 0;
const V: usize = 3;
const TH: usize = 6;
const BA: usize = 9;
const BG: usize = 12;
const FIELD: usize = 15;

#[derive(Debug, Error)]
pub enum MainsError {
    #[error(transparent)]
    Engine(#[from] EskfError),
    #[error("gap of {gap} s before t = {t}")]
    GapTooLarge { t: f64, gap: f64 },
    #[error("time goes backwards at t = {t}")]
    NonMonotoneTime { t: f64 },
    #[error("time step {0} outside (0, 0.1] s")]
    InvalidTimeStep(f64),
    #[error("non-finite navigation state")]
    NonFiniteState,
    #[error("stream has no IMU samples")]
    NoImu,
}

pub fn gravity_vector(g: f64) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: Quat,
    pub ba: Vector3<f64>,
    pub bg: Vector3<f64>,
}

impl NavState {
    pub fn at_rest(p: Vector3<f64>, q: Quat) -> Self {
        Self { p, v: Vector3::zeros(), q, ba: Vector3::zeros(), bg: Vector3::zeros() }
    }

    pub fn from_nominal(x: &NominalState) -> Self {
        Self {
            p: x.vec3(BlockKind::Position),
            v: x.vec3(BlockKind::Velocity),
            q: x.rotation(BlockKind::Attitude),
            ba: x.vec3(BlockKind::AccelBias),
            bg: x.vec3(BlockKind::GyroBias),
        }
    }

    pub fn write_nominal(&self, x: &mut NominalState) {
        x.set_vec3(BlockKind::Position, &self.p);
        x.set_vec3(BlockKind::Velocity, &self.v);
        x.set_rotation(BlockKind::Attitude, self.q);
        x.set_vec3(BlockKind::AccelBias, &self.ba);
        x.set_vec3(BlockKind::GyroBias, &self.bg);
    }

    /// Nominal state with the INS blocks in their canonical order.
    pub fn to_nominal(&self) -> NominalState {
        NominalState::new()
            .with_vec3(BlockKind::Position, self.p)
            .with_vec3(BlockKind::Velocity, self.v)
            .with_rotation(BlockKind::Attitude, self.q)
            .with_vec3(BlockKind::AccelBias, self.ba)
            .with_vec3(BlockKind::GyroBias, self.bg)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.ba.iter()).chain(self.bg.iter()).all(|x| x.is_finite())
            && self.q.coords.iter().all(|x| x.is_finite())
    }

    pub fn biases_within(&self, max_acc: f64, max_gyro: f64) -> bool {
        self.ba.norm() < max_acc && self.bg.norm() < max_gyro
    }
}

/// Intermediate quantities of one strapdown step, shared by the nominal update
/// and its Jacobians.
struct InsStep {
    omega: Vector3<f64>,
    acc_body: Vector3<f64>,
    rot_start: Matrix3<f64>,
    rot_mid: Matrix3<f64>,
    delta_q: Quat,
    acc_nav: Vector3<f64>,
    displacement: Vector3<f64>,
}

impl InsStep {
    fn new(x: &NavState, u: &ImuSample, dt: f64, gravity: &Vector3<f64>) -> Self {
        let omega = u.gyro - x.bg;
        let acc_body = u.acc - x.ba;
        let delta_q = exp_map(&(omega * dt));
        // specific force rotated with the mid-interval attitude
        let rot_mid = rotation_matrix(&quat_multiply(&x.q, &exp_map(&(omega * (0.5 * dt)))));
        let acc_nav = rot_mid * acc_body + gravity;
        let displacement = x.v * dt + acc_nav * (0.5 * dt * dt);
        Self { omega, acc_body, rot_start: rotation_matrix(&x.q), rot_mid, delta_q, acc_nav, displacement }
    }

    fn apply(&self, x: &NavState, dt: f64) -> NavState {
        NavState {
            p: x.p + self.displacement,
            v: x.v + self.acc_nav * dt,
            q: quat_multiply(&x.q, &self.delta_q),
            ba: x.ba,
            bg: x.bg,
        }
    }
}

/// One strapdown integration step.
pub fn ins_mechanization(x: &NavState, u: &ImuSample, dt: f64, gravity: f64) -> Result<NavState, MainsError> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(MainsError::InvalidTimeStep(dt));
    }
    let next = InsStep::new(x, u, dt, &gravity_vector(gravity)).apply(x, dt);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(MainsError::NonFiniteState)
    }
}

/// INS dynamics, plus local-field transport when the state has a
/// [`BlockKind::LocalField`] block right after the biases.
#[derive(Debug, Clone, Copy)]
pub struct InsProcess {
    pub gravity: f64,
    pub noise: NoiseConfig,
}

impl InsProcess {
    pub fn new(gravity: f64, noise: NoiseConfig) -> Self {
        Self { gravity, noise }
    }
}

fn put(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Matrix3<f64>) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

impl ProcessModel for InsProcess {
    type Input = ImuSample;

    fn transition(&self, x: &mut NominalState, u: &ImuSample, dt: f64) -> Transition {
        let with_field = x.has(BlockKind::LocalField);
        debug_assert_eq!(x.offset(BlockKind::GyroBias), BG);
        let na = if with_field {
            debug_assert_eq!(x.offset(BlockKind::LocalField), FIELD);
            FIELD + NUM_COEFFS
        } else {
            NAV_DIM
        };
        let nav = NavState::from_nominal(x);
        let step = InsStep::new(&nav, u, dt, &gravity_vector(self.gravity));
        step.apply(&nav, dt).write_nominal(x);

        let half_dt2 = 0.5 * dt * dt;
        let jr_full = right_jacobian(&(step.omega * dt));
        let jr_half = right_jacobian(&(step.omega * (0.5 * dt)));
        let rot_half_t = rotation_matrix(&exp_map(&(step.omega * (0.5 * dt)))).transpose();
        let ab_x = skew(&step.acc_body);
        let da_dth = -step.rot_mid * ab_x * rot_half_t;
        let da_dba = -step.rot_mid;
        let da_dbg = step.rot_mid * ab_x * jr_half * (0.5 * dt);

        let mut f = DMatrix::identity(na, na);
        put(&mut f, P, V, &(Matrix3::identity() * dt));
        put(&mut f, P, TH, &(da_dth * half_dt2));
        put(&mut f, P, BA, &(da_dba * half_dt2));
        put(&mut f, P, BG, &(da_dbg * half_dt2));
        put(&mut f, V, TH, &(da_dth * dt));
        put(&mut f, V, BA, &(da_dba * dt));
        put(&mut f, V, BG, &(da_dbg * dt));
        put(&mut f, TH, TH, &rotation_matrix(&step.delta_q).transpose());
        put(&mut f, TH, BG, &(-jr_full * dt));

        let n = &self.noise;
        let mut q = DMatrix::zeros(na, na);
        for i in 0..3 {
            q[(V + i, V + i)] = n.acc_noise * n.acc_noise * dt;
            q[(TH + i, TH + i)] = n.gyro_noise * n.gyro_noise * dt;
            q[(BA + i, BA + i)] = n.acc_bias_walk * n.acc_bias_walk * dt;
            q[(BG + i, BG + i)] = n.gyro_bias_walk * n.gyro_bias_walk * dt;
        }

        if with_field {
            let theta = LocalFieldCoeffs::from_slice(x.vector(BlockKind::LocalField).as_slice());
            let rt = step.rot_start.transpose();
            let disp_body = rt * step.displacement;
            let moved = transport_coeffs(&theta, &step.delta_q, &disp_body);
            x.vector_mut(BlockKind::LocalField).copy_from_slice(moved.0.as_slice());

            let jd = transport_jacobian_displacement(&theta, &step.delta_q);
            let jrot = transport_jacobian_rotation(&theta, &step.delta_q, &disp_body);
            let dd_dv = rt * dt;
            let dd_dth = skew(&disp_body) + rt * da_dth * half_dt2;
            let dd_dba = rt * da_dba * half_dt2;
            let dd_dbg = rt * da_dbg * half_dt2;
            let mut fblk = |c: usize, m: SMatrix<f64, NUM_COEFFS, 3>| f.fixed_view_mut::<NUM_COEFFS, 3>(FIELD, c).copy_from(&m);
            fblk(V, jd * dd_dv);
            fblk(TH, jd * dd_dth);
            fblk(BA, jd * dd_dba);
            fblk(BG, jd * dd_dbg - jrot * jr_full * dt);
            f.fixed_view_mut::<NUM_COEFFS, NUM_COEFFS>(FIELD, FIELD).copy_from(&transport_matrix(&step.delta_q, &disp_body));
            for i in 0..NUM_COEFFS {
                let w = if i < 3 { n.field_mean_walk } else { n.field_gradient_walk };
                q[(FIELD + i, FIELD + i)] = w * w * dt;
            }
        }
        Transition { f, q }
    }
}

/// Stack per-sensor fields into one 3N vector.
pub fn stack_fields(fields: &[Vector3<f64>]) -> DVector<f64> {
    DVector::from_iterator(3 * fields.len(), fields.iter().flat_map(|b| b.iter().copied()))
}

/// All array sensors against the local field model: `y_i = Φ(r_i) θ`.
#[derive(Debug, Clone)]
pub struct LocalArrayModel {
    stacked: DMatrix<f64>,
    noise_var: f64,
}

impl LocalArrayModel {
    pub fn new(geometry: &ArrayGeometry, mag_noise: f64) -> Self {
        let n = geometry.len();
        let mut stacked = DMatrix::zeros(3 * n, NUM_COEFFS);
        for (i, r) in geometry.positions().iter().enumerate() {
            stacked.fixed_view_mut::<3, NUM_COEFFS>(3 * i, 0).copy_from(&regressor(r));
        }
        Self { stacked, noise_var: mag_noise * mag_noise }
    }

    pub fn regressor(&self) -> &DMatrix<f64> {
        &self.stacked
    }
}

impl MeasurementModel for LocalArrayModel {
    fn name(&self) -> &'static str {
        "array-local"
    }
    fn dim(&self) -> usize {
        self.stacked.nrows()
    }
    fn predict(&self, x: &NominalState) -> DVector<f64> {
        &self.stacked * x.vector(BlockKind::LocalField)
    }
    fn jacobian(&self, x: &NominalState) -> Jacobian {
        Jacobian::new(self.dim()).with_block(x.offset(BlockKind::LocalField), self.stacked.clone())
    }
    fn noise(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) * self.noise_var
    }
}

/// The array measurement reduced to its least-squares estimate of θ.
///
/// For a linear model with isotropic noise, updating with
/// `(ΦᵀΦ)⁻¹Φᵀy` and covariance `σ²(ΦᵀΦ)⁻¹` gives exactly the same posterior as
/// the full 3N-dimensional update, at a fraction of the cost.
#[derive(Debug, Clone)]
pub struct CompressedLocalModel {
    projector: DMatrix<f64>,
    cov: DMatrix<f64>,
}

impl CompressedLocalModel {
    pub fn new(geometry: &ArrayGeometry, mag_noise: f64) -> Self {
        let full = LocalArrayModel::new(geometry, mag_noise);
        let info = full.stacked.tr_mul(&full.stacked);
        let inv = info.cholesky().expect("array geometry determines the local field").inverse();
        let projector = &inv * full.stacked.transpose();
        Self { projector, cov: inv * full.noise_var }
    }

    pub fn compress(&self, fields: &[Vector3<f64>]) -> DVector<f64> {
        &self.projector * stack_fields(fields)
    }
}

impl MeasurementModel for CompressedLocalModel {
    fn name(&self) -> &'static str {
        "array-local"
    }
    fn dim(&self) -> usize {
        NUM_COEFFS
    }
    fn predict(&self, x: &NominalState) -> DVector<f64> {
        x.vector(BlockKind::LocalField).clone()
    }
    fn jacobian(&self, x: &NominalState) -> Jacobian {
        Jacobian::new(NUM_COEFFS).with_block(x.offset(BlockKind::LocalField), DMatrix::identity(NUM_COEFFS, NUM_COEFFS))
    }
    fn noise(&self) -> DMatrix<f64> {
        self.cov.clone()
    }
}

/// Barometric altitude, `y = p_z`.
#[derive(Debug, Clone, Copy)]
pub struct BaroModel {
    pub noise_var: f64,
}

impl MeasurementModel for BaroModel {
    fn name(&self) -> &'static str {
        "baro"
    }
    fn dim(&self) -> usize {
        1
    }
    fn predict(&self, x: &NominalState) -> DVector<f64> {
        DVector::from_element(1, x.vec3(BlockKind::Position).z)
    }
    fn jacobian(&self, x: &NominalState) -> Jacobian {
        let mut h = DMatrix::zeros(1, 3);
        h[(0, 2)] = 1.0;
        Jacobian::new(1).with_block(x.offset(BlockKind::Position), h)
    }
    fn noise(&self) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.noise_var)
    }
}

/// Position and attitude fix. The measurement vector is `[p; q_w q_x q_y q_z]`
/// and the attitude innovation is the local rotation from estimate to fix.
#[derive(Debug, Clone, Copy)]
pub struct PoseFixModel {
    pub position_var: f64,
    pub attitude_var: f64,
}

impl PoseFixModel {
    pub fn measurement(fix: &PoseFix) -> DVector<f64> {
        let q = fix.attitude.as_ref();
        DVector::from_vec(vec![fix.position.x, fix.position.y, fix.position.z, q.w, q.i, q.j, q.k])
    }
}

impl MeasurementModel for PoseFixModel {
    fn name(&self) -> &'static str {
        "pose-fix"
    }
    fn dim(&self) -> usize {
        6
    }
    fn predict(&self, x: &NominalState) -> DVector<f64> {
        Self::measurement(&PoseFix { position: x.vec3(BlockKind::Position), attitude: x.rotation(BlockKind::Attitude) })
    }
    fn innovation(&self, x: &NominalState, y: &DVector<f64>) -> DVector<f64> {
        let p = x.vec3(BlockKind::Position);
        let fix = Quat::new_normalize(Quaternion::new(y[3], y[4], y[5], y[6]));
        let dth = error_between(&x.rotation(BlockKind::Attitude), &fix);
        DVector::from_vec(vec![y[0] - p.x, y[1] - p.y, y[2] - p.z, dth.x, dth.y, dth.z])
    }
    fn jacobian(&self, x: &NominalState) -> Jacobian {
        let mut hp = DMatrix::zeros(6, 3);
        hp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        let mut hq = DMatrix::zeros(6, 3);
        hq.fixed_view_mut::<3, 3>(3, 0).copy_from(&Matrix3::identity());
        Jacobian::new(6)
            .with_block(x.offset(BlockKind::Position), hp)
            .with_block(x.offset(BlockKind::Attitude), hq)
    }
    fn noise(&self) -> DMatrix<f64> {
        let mut r = DMatrix::zeros(6, 6);
        for i in 0..3 {
            r[(i, i)] = self.position_var;
            r[(3 + i, 3 + i)] = self.attitude_var;
        }
        r
    }
}

/// Relative pose between two filter epochs.
///
/// `delta_p` is the navigation-frame displacement and `delta_q = q_i* ⊗ q_j`.
/// The covariance is over `[δΔp; ε]` with the rotation error on the left,
/// `Δq = Exp(ε) ⊗ Δq̂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryIncrement {
    pub i: usize,
    pub j: usize,
    pub t_i: f64,
    pub t_j: f64,
    pub delta_p: Vector3<f64>,
    pub delta_q: Quat,
    pub cov: Matrix6<f64>,
}

impl OdometryIncrement {
    pub fn identity(i: usize, t: f64) -> Self {
        Self { i, j: i, t_i: t, t_j: t, delta_p: Vector3::zeros(), delta_q: Quat::identity(), cov: Matrix6::zeros() }
    }

    pub fn between(i: usize, j: usize, t_i: f64, t_j: f64, p_i: &Vector3<f64>, q_i: &Quat, p_j: &Vector3<f64>, q_j: &Quat) -> Self {
        Self {
            i,
            j,
            t_i,
            t_j,
            delta_p: p_j - p_i,
            delta_q: quat_multiply(&q_i.conjugate(), q_j),
            cov: Matrix6::zeros(),
        }
    }

    /// Chain two consecutive increments. Covariances add after moving the
    /// second one's rotation error through the first rotation.
    pub fn compose(&self, next: &OdometryIncrement) -> OdometryIncrement {
        let r1 = rotation_matrix(&self.delta_q);
        let mut g = Matrix6::identity();
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&r1);
        OdometryIncrement {
            i: self.i,
            j: next.j,
            t_i: self.t_i,
            t_j: next.t_j,
            delta_p: self.delta_p + next.delta_p,
            delta_q: quat_multiply(&self.delta_q, &next.delta_q),
            cov: self.cov + g * next.cov * g.transpose(),
        }
    }
}

/// Linear map from the stacked pose errors `[δp_i; δp_j; δθ_i; δθ_j]` to the
/// increment error, up to an overall sign that does not affect covariances.
pub fn odometry_error_map(q_i: &Quat, q_j: &Quat) -> SMatrix<f64, 6, 12> {
    let mut a = SMatrix::<f64, 6, 12>::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&-Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 6).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 9).copy_from(&-(rotation_matrix(q_i).transpose() * rotation_matrix(q_j)));
    a
}

/// Increment between the past-pose clone and the current pose of a filter.
pub fn odometry_from_state(state: &FilterState, i: usize, j: usize, t_i: f64) -> OdometryIncrement {
    let x = &state.nominal;
    let (p_i, q_i) = (x.vec3(BlockKind::PastPosition), x.rotation(BlockKind::PastAttitude));
    let (p_j, q_j) = (x.vec3(BlockKind::Position), x.rotation(BlockKind::Attitude));
    let mut inc = OdometryIncrement::between(i, j, t_i, state.time, &p_i, &q_i, &p_j, &q_j);
    let order = [BlockKind::PastPosition, BlockKind::Position, BlockKind::PastAttitude, BlockKind::Attitude];
    let idx: Vec<usize> = order.iter().flat_map(|k| state.nominal.range(*k).expect("pose blocks present")).collect();
    let sigma = state.cov.select_rows(&idx).select_columns(&idx);
    let sigma = SMatrix::<f64, 12, 12>::from_iterator(sigma.iter().copied());
    let a = odometry_error_map(&q_i, &q_j);
    let cov = a * sigma * a.transpose();
    inc.cov = 0.5 * (cov + cov.transpose());
    inc
}

pub const ODOMETRY_HEADER: &str = "t_i,t_j,dpx,dpy,dpz,dqw,dqx,dqy,dqz,cov (36 values row-major)";

/// One record per line: `t_i, t_j, Δp, Δq, covariance row-major`.
pub fn write_odometry<W: Write>(mut w: W, increments: &[OdometryIncrement]) -> std::io::Result<()> {
    writeln!(w, "# {ODOMETRY_HEADER}")?;
    for inc in increments {
        let q = inc.delta_q.as_ref();
        let mut fields = vec![inc.t_i, inc.t_j, inc.delta_p.x, inc.delta_p.y, inc.delta_p.z, q.w, q.i, q.j, q.k];
        for r in 0..6 {
            for c in 0..6 {
                fields.push(inc.cov[(r, c)]);
            }
        }
        let line: Vec<String> = fields.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Inverse of [`write_odometry`]. Step indices are the record positions.
pub fn read_odometry<R: BufRead>(r: R) -> Result<Vec<OdometryIncrement>, String> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", n + 1))?;
        if v.len() != 45 {
            return Err(format!("line {}: expected 45 fields, got {}", n + 1, v.len()));
        }
        let k = out.len();
        out.push(OdometryIncrement {
            i: k,
            j: k + 1,
            t_i: v[0],
            t_j: v[1],
            delta_p: Vector3::new(v[2], v[3], v[4]),
            delta_q: Quat::new_normalize(Quaternion::new(v[5], v[6], v[7], v[8])),
            cov: Matrix6::from_row_slice(&v[9..45]),
        });
    }
    Ok(out)
}

/// Starting pose and its covariance from the beginning of a stream.
///
/// A pose fix inside the initialization window sets position and attitude.
/// Otherwise the platform is assumed quasi-static: roll and pitch come from the
/// mean specific force, yaw and position start at zero.
pub fn initial_navigation(frames: &[SensorFrame], config: &SystemConfig) -> Result<(NavState, DMatrix<f64>), MainsError> {
    let t0 = frames.iter().find(|f| f.imu.is_some()).ok_or(MainsError::NoImu)?.t;
    let window = |f: &&SensorFrame| f.t <= t0 + config.init.duration;
    let init = &config.init;
    let mut p0 = DMatrix::zeros(NAV_DIM, NAV_DIM);
    let fix = if config.filter.use_pose_fix { frames.iter().take_while(window).find_map(|f| f.pose_fix) } else { None };
    let nav = match fix {
        Some(fix) => {
            let (ps, qs) = (config.noise.pose_fix_position_std, config.noise.pose_fix_attitude_std);
            for i in 0..3 {
                p0[(P + i, P + i)] = ps * ps;
                p0[(TH + i, TH + i)] = qs * qs;
            }
            NavState::at_rest(fix.position, fix.attitude)
        }
        None => {
            let accs: Vec<Vector3<f64>> = frames.iter().take_while(window).filter_map(|f| f.imu.map(|u| u.acc)).collect();
            let mean = accs.iter().sum::<Vector3<f64>>() / accs.len() as f64;
            let roll = mean.y.atan2(mean.z);
            let pitch = (-mean.x).atan2((mean.y * mean.y + mean.z * mean.z).sqrt());
            for i in 0..3 {
                p0[(P + i, P + i)] = init.position_std * init.position_std;
            }
            p0[(TH, TH)] = init.tilt_std * init.tilt_std;
            p0[(TH + 1, TH + 1)] = init.tilt_std * init.tilt_std;
            p0[(TH + 2, TH + 2)] = init.yaw_std * init.yaw_std;
            NavState::at_rest(Vector3::zeros(), from_euler(roll, pitch, 0.0))
        }
    };
    for i in 0..3 {
        p0[(V + i, V + i)] = init.velocity_std * init.velocity_std;
        p0[(BA + i, BA + i)] = init.acc_bias_std * init.acc_bias_std;
        p0[(BG + i, BG + i)] = init.gyro_bias_std * init.gyro_bias_std;
    }
    Ok((nav, p0))
}

/// Local field coefficients from the first magnetometer frame, with a diffuse
/// covariance around the fit.
pub fn initial_local_field(frames: &[SensorFrame], geometry: &ArrayGeometry, config: &SystemConfig) -> (LocalFieldCoeffs, DMatrix<f64>) {
    let theta = frames
        .iter()
        .find_map(|f| f.mag.as_ref())
        .and_then(|m| fit_least_squares(geometry.positions(), m))
        .unwrap_or_else(LocalFieldCoeffs::zeros);
    let mut p = DMatrix::zeros(NUM_COEFFS, NUM_COEFFS);
    for i in 0..NUM_COEFFS {
        let s = if i < 3 { config.init.field_mean_std } else { config.init.field_gradient_std };
        p[(i, i)] = s * s;
    }
    (theta, p)
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        o += b.nrows();
    }
    out
}

pub fn engine_options(config: &SystemConfig) -> EngineOptions {
    EngineOptions { joseph: config.filter.joseph, gate: config.filter.gate, max_condition: config.filter.max_condition }
}

/// Counts of applied and rejected updates per measurement type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct UpdateCounts {
    pub propagations: usize,
    pub mag: usize,
    pub fused: usize,
    pub baro: usize,
    pub pose_fix: usize,
    pub skipped: usize,
}

impl UpdateCounts {
    pub fn note(&mut self, status: UpdateStatus) -> bool {
        let ok = status == UpdateStatus::Applied;
        if !ok {
            self.skipped += 1;
        }
        ok
    }
}

/// Sequential frame clock: gap checks and the zero-order-hold IMU sample.
#[derive(Debug, Clone)]
pub struct FrameClock {
    last_t: f64,
    held: Option<ImuSample>,
    max_gap: f64,
}

impl FrameClock {
    pub fn new(t0: f64, max_gap: f64) -> Self {
        Self { last_t: t0, held: None, max_gap }
    }

    /// Returns the IMU sample and time step to propagate with before applying
    /// `frame`, then holds the frame's own IMU sample for the next interval.
    pub fn advance(&mut self, frame: &SensorFrame) -> Result<Option<(ImuSample, f64)>, MainsError> {
        let dt = frame.t - self.last_t;
        if dt < 0.0 {
            return Err(MainsError::NonMonotoneTime { t: frame.t });
        }
        if dt > self.max_gap {
            return Err(MainsError::GapTooLarge { t: frame.t, gap: dt });
        }
        let step = match self.held {
            Some(u) if dt > 0.0 => Some((u, dt)),
            _ => None,
        };
        if let Some(u) = frame.imu {
            self.held = Some(u);
        }
        self.last_t = frame.t;
        Ok(step)
    }
}

pub fn trajectory_point(state: &FilterState, fused: bool) -> TrajectoryPoint {
    let pr = state.nominal.range(BlockKind::Position).expect("position block");
    let ar = state.nominal.range(BlockKind::Attitude).expect("attitude block");
    TrajectoryPoint {
        t: state.time,
        position: state.nominal.vec3(BlockKind::Position),
        attitude: state.nominal.rotation(BlockKind::Attitude),
        position_var: Vector3::new(state.cov[(pr.start, pr.start)], state.cov[(pr.start + 1, pr.start + 1)], state.cov[(pr.start + 2, pr.start + 2)]),
        attitude_var: Vector3::new(state.cov[(ar.start, ar.start)], state.cov[(ar.start + 1, ar.start + 1)], state.cov[(ar.start + 2, ar.start + 2)]),
        fused,
    }
}

/// The MAINS filter, optionally carrying a past-pose clone for odometry.
#[derive(Debug)]
pub struct MainsFilter {
    engine: Eskf,
    pub state: FilterState,
    process: InsProcess,
    local: CompressedLocalModel,
    baro: BaroModel,
    pose: PoseFixModel,
    config: SystemConfig,
    clock: FrameClock,
    step: usize,
    clone_step: usize,
    clone_time: f64,
    odometry: bool,
    pub counts: UpdateCounts,
}

impl MainsFilter {
    /// Set up the filter from the start of `frames`. When `odometry` is set the
    /// pose is cloned immediately, at step 1.
    pub fn new(frames: &[SensorFrame], geometry: &ArrayGeometry, config: &SystemConfig, odometry: bool) -> Result<Self, MainsError> {
        let (nav, p_nav) = initial_navigation(frames, config)?;
        let (theta, p_theta) = initial_local_field(frames, geometry, config);
        let nominal = nav.to_nominal().with_vector(BlockKind::LocalField, DVector::from_column_slice(theta.0.as_slice()));
        let t0 = frames[0].t;
        let mut state = FilterState::new(nominal, block_diag(&[&p_nav, &p_theta]), t0)?;
        if odometry {
            augment_block(&mut state, BlockKind::Position, BlockKind::PastPosition)?;
            augment_block(&mut state, BlockKind::Attitude, BlockKind::PastAttitude)?;
        }
        let n = &config.noise;
        Ok(Self {
            engine: Eskf::new(engine_options(config)),
            state,
            process: InsProcess::new(config.filter.gravity, *n),
            local: CompressedLocalModel::new(geometry, n.mag_noise),
            baro: BaroModel { noise_var: n.baro_noise * n.baro_noise },
            pose: PoseFixModel { position_var: n.pose_fix_position_std.powi(2), attitude_var: n.pose_fix_attitude_std.powi(2) },
            config: *config,
            clock: FrameClock::new(t0, config.filter.max_gap),
            step: 1,
            clone_step: 1,
            clone_time: t0,
            odometry,
            counts: UpdateCounts::default(),
        })
    }

    pub fn with_engine(mut self, engine: Eskf) -> Self {
        self.engine = engine;
        self
    }

    /// Current step index; the initial state is step 1.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Propagate to `frame.t`, apply its measurements and emit an odometry
    /// increment when a clone interval closes.
    pub fn process(&mut self, frame: &SensorFrame) -> Result<Option<OdometryIncrement>, MainsError> {
        let propagated = if let Some((u, dt)) = self.clock.advance(frame)? {
            self.engine.propagate(&mut self.state, &self.process, &u, dt)?;
            self.step += 1;
            self.counts.propagations += 1;
            true
        } else {
            false
        };
        self.state.time = frame.t;
        let f = &self.config.filter;
        if f.use_pose_fix {
            if let Some(fix) = &frame.pose_fix {
                let rec = self.engine.update(&mut self.state, &self.pose, &PoseFixModel::measurement(fix))?;
                if self.counts.note(rec.status) {
                    self.counts.pose_fix += 1;
                }
            }
        }
        if f.use_mag {
            if let Some(mag) = &frame.mag {
                let y = self.local.compress(mag);
                let rec = self.engine.update(&mut self.state, &self.local, &y)?;
                if self.counts.note(rec.status) {
                    self.counts.mag += 1;
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
        let nav = NavState::from_nominal(&self.state.nominal);
        if !nav.biases_within(f.max_acc_bias, f.max_gyro_bias) {
            log::warn!("bias estimate outside sanity bounds at t = {}", frame.t);
        }
        let k = f.odometry_interval.max(1);
        if self.odometry && propagated && (self.step - 1) % k == 0 {
            let inc = odometry_from_state(&self.state, self.clone_step, self.step, self.clone_time);
            reclone_block(&mut self.state, BlockKind::Position, BlockKind::PastPosition)?;
            reclone_block(&mut self.state, BlockKind::Attitude, BlockKind::PastAttitude)?;
            self.clone_step = self.step;
            self.clone_time = frame.t;
            return Ok(Some(inc));
        }
        Ok(None)
    }
}

#[derive(Debug)]
pub struct MainsOutput {
    pub trajectory: Vec<TrajectoryPoint>,
    pub odometry: Vec<OdometryIncrement>,
    pub final_state: FilterState,
    pub counts: UpdateCounts,
}

/// Run MAINS over a whole stream. The trajectory has one point per frame.
pub fn run_mains(frames: &[SensorFrame], geometry: &ArrayGeometry, config: &SystemConfig, odometry: bool) -> Result<MainsOutput, MainsError> {
    let mut filter = MainsFilter::new(frames, geometry, config, odometry)?;
    let mut trajectory = Vec::with_capacity(frames.len());
    let mut incs = Vec::new();
    for frame in frames {
        if let Some(inc) = filter.process(frame)? {
            incs.push(inc);
        }
        trajectory.push(trajectory_point(&filter.state, false));
    }
    Ok(MainsOutput { trajectory, odometry: incs, final_state: filter.state, counts: filter.counts })
}
