//! Filter configuration shared by all three systems.
//!
//! Every struct deserializes with defaults for missing keys, so a config file
//! only needs the values it overrides.

use serde::{Deserialize, Serialize};

use crate::mag_global::GpHyperparameters;

/// Sensor noise densities and random-walk strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Accelerometer white noise, m/s²/√Hz.
    pub acc_noise: f64,
    /// Gyroscope white noise, rad/s/√Hz.
    pub gyro_noise: f64,
    /// Accelerometer bias random walk, m/s²/√s.
    pub acc_bias_walk: f64,
    /// Gyroscope bias random walk, rad/s/√s.
    pub gyro_bias_walk: f64,
    /// Magnetometer noise per axis, µT.
    pub mag_noise: f64,
    /// Barometer altitude noise, m.
    pub baro_noise: f64,
    pub pose_fix_position_std: f64,
    pub pose_fix_attitude_std: f64,
    /// Random walk of the local mean field, µT/√s. Absorbs field curvature
    /// the first-order model cannot represent.
    pub field_mean_walk: f64,
    /// Random walk of the local field gradient, µT/m/√s.
    pub field_gradient_walk: f64,
    /// Error of the first-order model's centre field against the true field
    /// at the array centre, µT per axis. Used where that centre field is
    /// compared with the global map.
    pub centre_field_error: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            acc_noise: 0.02,
            gyro_noise: 0.002,
            acc_bias_walk: 1e-4,
            gyro_bias_walk: 1e-5,
            mag_noise: 0.5,
            baro_noise: 0.1,
            pose_fix_position_std: 0.005,
            pose_fix_attitude_std: 0.005,
            field_mean_walk: 0.1,
            field_gradient_walk: 1.0,
            centre_field_error: 0.4,
        }
    }
}

/// Initial uncertainties and the initialization window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Length of the quasi-static or pose-aided start segment, s.
    pub duration: f64,
    pub position_std: f64,
    pub velocity_std: f64,
    pub tilt_std: f64,
    /// Yaw uncertainty when no pose fix is available at start, rad.
    pub yaw_std: f64,
    pub acc_bias_std: f64,
    pub gyro_bias_std: f64,
    pub field_mean_std: f64,
    pub field_gradient_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            duration: 5.0,
            position_std: 0.01,
            velocity_std: 0.05,
            tilt_std: 0.02,
            yaw_std: 1.0,
            acc_bias_std: 0.1,
            gyro_bias_std: 0.01,
            field_mean_std: 50.0,
            field_gradient_std: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Gravity magnitude, m/s², acting along −z.
    pub gravity: f64,
    /// Propagation steps per odometry increment.
    pub odometry_interval: usize,
    /// Magnetometer frames between global-model updates in the tight filter.
    pub switch_period: usize,
    /// Largest tolerated gap between consecutive frames, s.
    pub max_gap: f64,
    pub joseph: bool,
    /// Chi-square gate on innovations; absent means no gating.
    pub gate: Option<f64>,
    pub max_condition: f64,
    pub use_mag: bool,
    pub use_baro: bool,
    pub use_pose_fix: bool,
    pub max_acc_bias: f64,
    pub max_gyro_bias: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            odometry_interval: 20,
            switch_period: 100,
            max_gap: 0.5,
            joseph: true,
            gate: None,
            max_condition: 1e12,
            use_mag: true,
            use_baro: true,
            use_pose_fix: true,
            max_acc_bias: 1.0,
            max_gyro_bias: 0.1,
        }
    }
}

/// Global field map settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub hyper: GpHyperparameters,
    pub num_modes: usize,
    /// Relative margin added around the area the map must cover.
    pub margin: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { hyper: GpHyperparameters::default(), num_modes: 300, margin: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub noise: NoiseConfig,
    pub init: InitConfig,
    pub filter: FilterConfig,
    pub map: MapConfig,
}
