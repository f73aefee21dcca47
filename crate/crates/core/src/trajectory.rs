//! Estimated or true trajectories and their CSV form.

use std::io::{BufRead, Write};

use nalgebra::{Quaternion, Vector3};
use thiserror::Error;

use crate::geom::Quat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub position: Vector3<f64>,
    pub attitude: Quat,
    /// Diagonal of the position error covariance; zero for truth.
    pub position_var: Vector3<f64>,
    /// Diagonal of the attitude error covariance; zero for truth.
    pub attitude_var: Vector3<f64>,
    /// Set on epochs where the tight filter applied its global-model update.
    pub fused: bool,
}

impl TrajectoryPoint {
    pub fn truth(t: f64, position: Vector3<f64>, attitude: Quat) -> Self {
        Self {
            t,
            position,
            attitude,
            position_var: Vector3::zeros(),
            attitude_var: Vector3::zeros(),
            fused: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const TRAJECTORY_HEADER: &str = "t,px,py,pz,qw,qx,qy,qz,var_px,var_py,var_pz,var_rx,var_ry,var_rz,fused";

/// Write a trajectory as CSV. Floats use Rust's shortest round-trip formatting,
/// so reading the file back is lossless.
pub fn write_trajectory_csv<W: Write>(mut w: W, points: &[TrajectoryPoint]) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for p in points {
        let q = p.attitude.as_ref();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            p.t,
            p.position.x,
            p.position.y,
            p.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
            p.position_var.x,
            p.position_var.y,
            p.position_var.z,
            p.attitude_var.x,
            p.attitude_var.y,
            p.attitude_var.z,
            u8::from(p.fused)
        )?;
    }
    Ok(())
}

pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<Vec<TrajectoryPoint>, TrajectoryError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if n == 0 {
            if line.trim() != TRAJECTORY_HEADER {
                return Err(TrajectoryError::Parse { line: 1, msg: format!("unexpected header `{line}`") });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrajectoryError::Parse { line: lineno, msg: e.to_string() })?;
        if vals.len() != 15 {
            return Err(TrajectoryError::Parse { line: lineno, msg: format!("expected 15 fields, got {}", vals.len()) });
        }
        out.push(TrajectoryPoint {
            t: vals[0],
            position: Vector3::new(vals[1], vals[2], vals[3]),
            attitude: Quat::new_normalize(Quaternion::new(vals[4], vals[5], vals[6], vals[7])),
            position_var: Vector3::new(vals[8], vals[9], vals[10]),
            attitude_var: Vector3::new(vals[11], vals[12], vals[13]),
            fused: vals[14] != 0.0,
        });
    }
    Ok(out)
}
