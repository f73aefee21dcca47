//! Sensor records and the magnetometer array geometry.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geom::Quat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force, body frame, m/s².
    pub acc: Vector3<f64>,
    /// Angular rate, body frame, rad/s.
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaroSample {
    pub t: f64,
    /// Offset-corrected altitude, m.
    pub altitude: f64,
}

/// External pose measurement, e.g. from motion capture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFix {
    pub position: Vector3<f64>,
    pub attitude: Quat,
}

/// One timestamped bundle of sensor readings. Absent payloads are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub t: f64,
    pub imu: Option<ImuSample>,
    /// Body-frame field per array sensor, µT.
    pub mag: Option<Vec<Vector3<f64>>>,
    pub baro: Option<f64>,
    pub pose_fix: Option<PoseFix>,
}

impl SensorFrame {
    pub fn empty(t: f64) -> Self {
        Self { t, imu: None, mag: None, baro: None, pose_fix: None }
    }

    pub fn has_payload(&self) -> bool {
        self.imu.is_some() || self.mag.is_some() || self.baro.is_some() || self.pose_fix.is_some()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("array needs at least 3 sensors, got {0}")]
    TooFew(usize),
    #[error("sensors {0} and {1} share a position")]
    Duplicate(usize, usize),
    #[error("sensor positions are collinear")]
    Collinear,
}

/// Body-frame positions of the magnetometers, metres.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    positions: Vec<Vector3<f64>>,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if positions.len() < 3 {
            return Err(GeometryError::TooFew(positions.len()));
        }
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                if (positions[i] - positions[j]).norm() < 1e-9 {
                    return Err(GeometryError::Duplicate(i, j));
                }
            }
        }
        let mean = positions.iter().sum::<Vector3<f64>>() / positions.len() as f64;
        let scatter: Matrix3<f64> = positions.iter().map(|p| (p - mean) * (p - mean).transpose()).sum();
        let mut eig = scatter.symmetric_eigenvalues().as_slice().to_vec();
        eig.sort_by(f64::total_cmp);
        if eig[1] <= 1e-12 * eig[2].max(1e-300) {
            return Err(GeometryError::Collinear);
        }
        Ok(Self { positions })
    }

    /// Planar grid of `cols × rows` sensors spanning `width × height` metres, centred at the origin.
    pub fn planar_grid(cols: usize, rows: usize, width: f64, height: f64) -> Result<Self, GeometryError> {
        let step = |n: usize, span: f64| if n > 1 { span / (n - 1) as f64 } else { 0.0 };
        let (dx, dy) = (step(cols, width), step(rows, height));
        let mut p = Vec::with_capacity(cols * rows);
        for r in 0..rows {
            for c in 0..cols {
                p.push(Vector3::new(c as f64 * dx - width / 2.0, r as f64 * dy - height / 2.0, 0.0));
            }
        }
        Self::new(p)
    }

    /// 30 sensors in a 6 × 5 grid on a 345 × 245 mm board.
    pub fn default_board() -> Self {
        Self::planar_grid(6, 5, 0.345, 0.245).expect("valid default board")
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_board_layout() {
        let g = ArrayGeometry::default_board();
        assert_eq!(g.len(), 30);
        let max_x = g.positions().iter().map(|p| p.x).fold(f64::MIN, f64::max);
        let max_y = g.positions().iter().map(|p| p.y).fold(f64::MIN, f64::max);
        assert!((max_x - 0.1725).abs() < 1e-12);
        assert!((max_y - 0.1225).abs() < 1e-12);
        let centroid: Vector3<f64> = g.positions().iter().sum::<Vector3<f64>>() / 30.0;
        assert!(centroid.norm() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_arrays() {
        let line = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(ArrayGeometry::new(line), Err(GeometryError::Collinear));
        let dup = vec![Vector3::zeros(), Vector3::x(), Vector3::zeros()];
        assert_eq!(ArrayGeometry::new(dup), Err(GeometryError::Duplicate(0, 2)));
        assert_eq!(ArrayGeometry::new(vec![Vector3::x()]), Err(GeometryError::TooFew(1)));
    }
}
