//! Preparing inputs and running one system over them.

use imslam_core::config::SystemConfig;
use imslam_core::eskf::{BlockKind, FilterState};
use imslam_core::frames::{ArrayGeometry, ImuSample, SensorFrame};
use imslam_core::mag_global::{GpDomain, GpError};
use imslam_core::mains::{run_mains, MainsError, OdometryIncrement, UpdateCounts};
use imslam_core::sim::{Scenario, SensorSimConfig, SimError, SyntheticRun, TrajectorySpec};
use imslam_core::slam_loose::run_loose;
use imslam_core::slam_tight::{run_tight_slam, JumpSample};
use imslam_core::trajectory::TrajectoryPoint;
use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Filter(#[from] MainsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Map(#[from] GpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("cannot emulate {requested} IMUs: {reason}")]
    ImuCount { requested: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum System {
    /// Dead reckoning: MAINS with magnetometer and barometer updates off.
    Ins,
    Mains,
    Loose,
    Tight,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Ins => "ins",
            System::Mains => "mains",
            System::Loose => "loose",
            System::Tight => "tight",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            System::Ins => "INS",
            System::Mains => "MAINS",
            System::Loose => "IM-SLAM (loose)",
            System::Tight => "IM-SLAM (tight)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub system: System,
    pub baro: bool,
    /// Number of averaged IMUs; `None` keeps the input as recorded.
    pub imu_count: Option<usize>,
    pub seed: u64,
}

impl RunOptions {
    pub fn new(system: System) -> Self {
        Self { system, baro: true, imu_count: None, seed: 0 }
    }
}

/// Synthetic path shapes, in the form accepted by config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PathShape {
    Rectangle { width: f64, depth: f64, laps: usize, speed: f64, dwell: f64 },
    Corridor { length: f64, passes: usize, speed: f64, dwell: f64 },
    Spiral { radius: f64, climb: f64, turns: f64, speed: f64, dwell: f64 },
}

impl PathShape {
    pub fn spec(&self) -> TrajectorySpec {
        match *self {
            PathShape::Rectangle { width, depth, laps, speed, dwell } => TrajectorySpec::rectangle_loop(width, depth, laps, speed, dwell),
            PathShape::Corridor { length, passes, speed, dwell } => TrajectorySpec::long_corridor(length, passes, speed, dwell),
            PathShape::Spiral { radius, climb, turns, speed, dwell } => TrajectorySpec::spiral(radius, climb, turns, speed, dwell),
        }
    }

    /// A loop of about two minutes.
    pub fn default_loop() -> Self {
        PathShape::Rectangle { width: 5.0, depth: 2.0, laps: 6, speed: 0.8, dwell: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub path: PathShape,
    #[serde(default)]
    pub sensors: SensorSimConfig,
}

impl SyntheticSpec {
    pub fn scenario(&self, config: &SystemConfig, imu_count: Option<usize>, seed: u64) -> Scenario {
        let mut sensors = self.sensors;
        if let Some(k) = imu_count {
            sensors.imu_count = k;
        }
        Scenario { trajectory: self.path.spec(), sensors, map: config.map, seed }
    }
}

/// Everything a filter run needs, in SI units and µT.
#[derive(Debug, Clone)]
pub struct RunInput {
    pub name: String,
    pub geometry: ArrayGeometry,
    pub frames: Vec<SensorFrame>,
    pub truth: Vec<TrajectoryPoint>,
    pub domain: GpDomain,
    /// Number of IMUs averaged into `frames`.
    pub imu_count: usize,
}

pub fn truth_points(run: &SyntheticRun) -> Vec<TrajectoryPoint> {
    run.truth.iter().map(|s| TrajectoryPoint::truth(s.t, s.position, s.attitude)).collect()
}

/// Synthesize the scenario for `seed`; the world and the sensor noise both
/// derive from it.
pub fn synthetic_input(name: &str, spec: &SyntheticSpec, config: &SystemConfig, imu_count: Option<usize>, seed: u64) -> Result<RunInput, RunError> {
    let scenario = spec.scenario(config, imu_count, seed);
    let run = scenario.build(&ArrayGeometry::default_board())?;
    Ok(RunInput {
        name: name.to_string(),
        truth: truth_points(&run),
        imu_count: scenario.sensors.imu_count.max(1),
        geometry: run.geometry,
        frames: run.frames,
        domain: run.world.domain,
    })
}

fn array_reach(geometry: &ArrayGeometry) -> f64 {
    geometry.positions().iter().map(|r| r.norm()).fold(0.0, f64::max)
}

/// Area the map must cover: the declared bounds, or the ground-truth track
/// widened by the array reach.
pub fn dataset_bounds(ds: &Dataset) -> Result<(Vector3<f64>, Vector3<f64>), RunError> {
    if let Some(b) = ds.meta.map {
        return Ok((Vector3::from(b.min), Vector3::from(b.max)));
    }
    let track: Vec<Vector3<f64>> = if ds.truth.is_empty() {
        ds.frames.iter().filter_map(|f| f.pose_fix.map(|p| p.position)).collect()
    } else {
        ds.truth.iter().map(|p| p.position).collect()
    };
    if track.is_empty() {
        return Err(DatasetError::MissingCalibration("no [map] bounds and no positions to derive them from".into()).into());
    }
    let pad = Vector3::repeat(array_reach(&ds.geometry));
    let lo = track.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = track.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    Ok((lo - pad, hi + pad))
}

/// Prepare a dataset for a run, emulating `imu_count` averaged IMUs if asked.
pub fn dataset_input(ds: &Dataset, config: &SystemConfig, imu_count: Option<usize>, seed: u64) -> Result<RunInput, RunError> {
    let (lo, hi) = dataset_bounds(ds)?;
    let domain = GpDomain::covering(lo, hi, config.map.margin, config.map.num_modes, config.map.hyper)?;
    let recorded = ds.meta.imu_averaged.max(1);
    let mut frames = ds.frames.clone();
    let count = match imu_count {
        None => recorded,
        Some(k) if k == recorded && ds.raw_imu.is_empty() => k,
        Some(k) => {
            emulate_imu_count(&mut frames, &ds.raw_imu, recorded, k, config, seed)?;
            k
        }
    };
    Ok(RunInput { name: ds.meta.name.clone(), geometry: ds.geometry.clone(), frames, truth: ds.truth.clone(), domain, imu_count: count })
}

fn average(samples: &[ImuSample]) -> (Vector3<f64>, Vector3<f64>) {
    let n = samples.len() as f64;
    let acc = samples.iter().map(|s| s.acc).sum::<Vector3<f64>>() / n;
    let gyro = samples.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    (acc, gyro)
}

/// Replace the IMU stream by an average of `k` sensors. With raw channels the
/// first `k` are averaged; otherwise white noise of variance
/// `σ²(1/k − 1/recorded)` is added, `σ` being the single-sensor noise of the
/// config at the sample interval.
pub fn emulate_imu_count(
    frames: &mut [SensorFrame],
    raw: &[Vec<ImuSample>],
    recorded: usize,
    k: usize,
    config: &SystemConfig,
    seed: u64,
) -> Result<(), RunError> {
    if k == 0 {
        return Err(RunError::ImuCount { requested: k, reason: "count must be positive".into() });
    }
    if !raw.is_empty() {
        let channels = raw[0].len();
        if k > channels {
            return Err(RunError::ImuCount { requested: k, reason: format!("only {channels} raw channels") });
        }
        let mut it = raw.iter();
        for f in frames.iter_mut() {
            if let Some(imu) = f.imu.as_mut() {
                let chans = it.next().ok_or_else(|| RunError::ImuCount { requested: k, reason: "raw channels shorter than stream".into() })?;
                (imu.acc, imu.gyro) = average(&chans[..k]);
            }
        }
        return Ok(());
    }
    if k > recorded {
        return Err(RunError::ImuCount { requested: k, reason: format!("input already averages {recorded} sensors and has no raw channels") });
    }
    let extra = 1.0 / k as f64 - 1.0 / recorded as f64;
    let times: Vec<f64> = frames.iter().filter(|f| f.imu.is_some()).map(|f| f.t).collect();
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    gaps.sort_by(f64::total_cmp);
    let Some(&dt) = gaps.get(gaps.len() / 2) else { return Ok(()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut draw = |sigma: f64| -> Vector3<f64> {
        let s = sigma * (extra / dt).sqrt();
        Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * s)
    };
    for f in frames.iter_mut() {
        if let Some(imu) = f.imu.as_mut() {
            imu.acc += draw(config.noise.acc_noise);
            imu.gyro += draw(config.noise.gyro_noise);
        }
    }
    Ok(())
}

/// Filter configuration for a run: the baro switch, dead reckoning for the
/// INS system, and IMU noise scaled to the averaged sensor count.
pub fn effective_config(base: &SystemConfig, options: &RunOptions, imu_count: usize) -> SystemConfig {
    let mut cfg = *base;
    let scale = 1.0 / (imu_count.max(1) as f64).sqrt();
    cfg.noise.acc_noise *= scale;
    cfg.noise.gyro_noise *= scale;
    cfg.filter.use_baro &= options.baro;
    if options.system == System::Ins {
        cfg.filter.use_mag = false;
        cfg.filter.use_baro = false;
    }
    cfg
}

#[derive(Debug, Clone)]
pub struct SystemOutput {
    pub trajectory: Vec<TrajectoryPoint>,
    pub odometry: Vec<OdometryIncrement>,
    /// Global map weights and their variances, for the SLAM systems.
    pub map: Option<(DVector<f64>, DVector<f64>)>,
    pub jumps: Vec<JumpSample>,
    pub counts: UpdateCounts,
    pub out_of_domain_updates: usize,
}

fn map_of(state: &FilterState) -> Option<(DVector<f64>, DVector<f64>)> {
    let range = state.nominal.range(BlockKind::GlobalField).ok()?;
    let var = DVector::from_iterator(range.len(), range.map(|i| state.cov[(i, i)]));
    Some((state.nominal.vector(BlockKind::GlobalField).clone(), var))
}

pub fn run_system(system: System, input: &RunInput, config: &SystemConfig) -> Result<SystemOutput, RunError> {
    let (frames, g, domain) = (&input.frames, &input.geometry, &input.domain);
    if frames.is_empty() {
        return Err(RunError::Config("input has no frames".into()));
    }
    Ok(match system {
        System::Ins | System::Mains => {
            let out = run_mains(frames, g, config, true)?;
            SystemOutput { trajectory: out.trajectory, odometry: out.odometry, map: None, jumps: Vec::new(), counts: out.counts, out_of_domain_updates: 0 }
        }
        System::Loose => {
            let out = run_loose(frames, g, domain, config)?;
            SystemOutput {
                map: map_of(&out.final_state),
                trajectory: out.trajectory,
                odometry: Vec::new(),
                jumps: Vec::new(),
                counts: out.counts,
                out_of_domain_updates: out.out_of_domain_updates,
            }
        }
        System::Tight => {
            let out = run_tight_slam(frames, g, domain, config)?;
            SystemOutput {
                map: map_of(&out.final_state),
                trajectory: out.trajectory,
                odometry: Vec::new(),
                jumps: out.jumps,
                counts: out.counts,
                out_of_domain_updates: out.out_of_domain_updates,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use imslam_core::frames::ImuSample;

    fn still(n: usize) -> Vec<SensorFrame> {
        (0..n)
            .map(|k| {
                let mut f = SensorFrame::empty(k as f64 * 0.01);
                f.imu = Some(ImuSample { t: f.t, acc: Vector3::new(0.0, 0.0, 9.81), gyro: Vector3::zeros() });
                f
            })
            .collect()
    }

    fn acc_var(frames: &[SensorFrame]) -> f64 {
        let xs: Vec<f64> = frames.iter().map(|f| f.imu.unwrap().acc.x).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    }

    #[test]
    fn added_noise_matches_target_variance() {
        let cfg = SystemConfig::default();
        let mut frames = still(20000);
        emulate_imu_count(&mut frames, &[], 4, 1, &cfg, 3).unwrap();
        let target = cfg.noise.acc_noise.powi(2) / 0.01 * (1.0 - 0.25);
        let v = acc_var(&frames);
        assert!((v / target - 1.0).abs() < 0.05, "{v} vs {target}");
        assert!(emulate_imu_count(&mut still(10), &[], 4, 8, &cfg, 3).is_err());
    }

    #[test]
    fn raw_channels_are_averaged() {
        let mut frames = still(3);
        let raw: Vec<Vec<ImuSample>> = (0..3)
            .map(|k| (0..4).map(|j| ImuSample { t: 0.0, acc: Vector3::repeat(j as f64), gyro: Vector3::repeat(k as f64) }).collect())
            .collect();
        emulate_imu_count(&mut frames, &raw, 1, 2, &SystemConfig::default(), 0).unwrap();
        assert_eq!(frames[0].imu.unwrap().acc, Vector3::repeat(0.5));
        assert_eq!(frames[2].imu.unwrap().gyro, Vector3::repeat(2.0));
        assert!(emulate_imu_count(&mut frames, &raw, 1, 5, &SystemConfig::default(), 0).is_err());
    }

    #[test]
    fn effective_config_switches() {
        let base = SystemConfig::default();
        let mut o = RunOptions::new(System::Tight);
        o.baro = false;
        let c = effective_config(&base, &o, 4);
        assert!(!c.filter.use_baro && c.filter.use_mag);
        assert!((c.noise.acc_noise - base.noise.acc_noise / 2.0).abs() < 1e-15);
        let ins = effective_config(&base, &RunOptions::new(System::Ins), 1);
        assert!(!ins.filter.use_mag && !ins.filter.use_baro);
        assert_eq!(ins.noise, base.noise);
    }
}
