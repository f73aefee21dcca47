//! End errors and error time series against ground truth.

use imslam_core::geom::{wrap_angle, yaw_of, Quat};
use imslam_core::trajectory::TrajectoryPoint;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("estimate and truth do not overlap (estimate [{est0}, {est1}] s, truth [{gt0}, {gt1}] s)")]
    NoOverlap { est0: f64, est1: f64, gt0: f64, gt1: f64 },
    #[error("empty trajectory")]
    Empty,
}

/// Errors at one estimate epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub t: f64,
    pub horizontal: f64,
    pub vertical: f64,
    /// Degrees.
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub end_horizontal: f64,
    pub end_vertical: f64,
    pub end_yaw_deg: f64,
    /// Time of the last epoch covered by both trajectories.
    pub end_time: f64,
    pub series: Vec<ErrorSample>,
}

/// Truth pose at `t`, interpolated linearly in position and by slerp in
/// attitude. `None` outside the truth span.
pub fn truth_at(truth: &[TrajectoryPoint], t: f64) -> Option<(Vector3<f64>, Quat)> {
    let (first, last) = (truth.first()?, truth.last()?);
    if t < first.t || t > last.t {
        return None;
    }
    let k = truth.partition_point(|p| p.t <= t);
    if k == truth.len() {
        return Some((last.position, last.attitude));
    }
    let (a, b) = (&truth[k - 1], &truth[k]);
    let span = b.t - a.t;
    let s = if span > 0.0 { (t - a.t) / span } else { 0.0 };
    let p = a.position.lerp(&b.position, s);
    let q = a.attitude.try_slerp(&b.attitude, s, 1e-12).unwrap_or(a.attitude);
    Some((p, q))
}

pub fn pose_errors(t: f64, est: &TrajectoryPoint, p: &Vector3<f64>, q: &Quat) -> ErrorSample {
    let d = est.position - p;
    ErrorSample {
        t,
        horizontal: d.xy().norm(),
        vertical: d.z.abs(),
        yaw: wrap_angle(yaw_of(&est.attitude) - yaw_of(q)).abs().to_degrees(),
    }
}

/// Errors of `estimate` at every epoch covered by `truth`; the end errors
/// are those at the last covered epoch.
pub fn compute_metrics(estimate: &[TrajectoryPoint], truth: &[TrajectoryPoint]) -> Result<Metrics, MetricsError> {
    let (Some(e0), Some(e1)) = (estimate.first(), estimate.last()) else { return Err(MetricsError::Empty) };
    let (Some(g0), Some(g1)) = (truth.first(), truth.last()) else { return Err(MetricsError::Empty) };
    let series: Vec<ErrorSample> = estimate
        .iter()
        .filter_map(|e| truth_at(truth, e.t).map(|(p, q)| pose_errors(e.t, e, &p, &q)))
        .collect();
    let Some(end) = series.last().copied() else {
        return Err(MetricsError::NoOverlap { est0: e0.t, est1: e1.t, gt0: g0.t, gt1: g1.t });
    };
    Ok(Metrics { end_horizontal: end.horizontal, end_vertical: end.vertical, end_yaw_deg: end.yaw, end_time: end.t, series })
}

pub fn write_error_series<W: std::io::Write>(mut w: W, series: &[ErrorSample]) -> std::io::Result<()> {
    writeln!(w, "t,horizontal,vertical,yaw_deg")?;
    for s in series {
        writeln!(w, "{},{},{},{}", s.t, s.horizontal, s.vertical, s.yaw)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use imslam_core::geom::from_euler;

    fn pt(t: f64, p: Vector3<f64>, yaw_deg: f64) -> TrajectoryPoint {
        TrajectoryPoint::truth(t, p, from_euler(0.0, 0.0, yaw_deg.to_radians()))
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let a: Vec<_> = (0..50).map(|k| pt(k as f64 * 0.1, Vector3::new(k as f64, 0.5, 0.1), k as f64 * 7.0)).collect();
        let m = compute_metrics(&a, &a).unwrap();
        assert_eq!((m.end_horizontal, m.end_vertical), (0.0, 0.0));
        assert!(m.end_yaw_deg < 1e-9);
        assert!(m.series.iter().all(|s| s.horizontal == 0.0 && s.yaw < 1e-9));
    }

    #[test]
    fn three_four_five() {
        let truth = vec![pt(0.0, Vector3::zeros(), 0.0), pt(1.0, Vector3::new(1.0, 1.0, 1.0), 0.0)];
        let est = vec![pt(1.0, Vector3::new(4.0, 5.0, 1.0), 0.0)];
        let m = compute_metrics(&est, &truth).unwrap();
        assert!((m.end_horizontal - 5.0).abs() < 1e-12);
        assert_eq!(m.end_vertical, 0.0);
    }

    #[test]
    fn yaw_wraps() {
        let truth = vec![pt(0.0, Vector3::zeros(), 179.0)];
        let est = vec![pt(0.0, Vector3::zeros(), -179.0)];
        let m = compute_metrics(&est, &truth).unwrap();
        assert!((m.end_yaw_deg - 2.0).abs() < 1e-9, "{}", m.end_yaw_deg);
    }

    #[test]
    fn truth_is_interpolated() {
        let truth = vec![pt(0.0, Vector3::zeros(), 0.0), pt(2.0, Vector3::new(2.0, 0.0, 4.0), 90.0)];
        let (p, q) = truth_at(&truth, 0.5).unwrap();
        assert!((p - Vector3::new(0.5, 0.0, 1.0)).norm() < 1e-12);
        assert!((yaw_of(&q).to_degrees() - 22.5).abs() < 1e-9);
        assert!(truth_at(&truth, 2.1).is_none());
    }

    #[test]
    fn disjoint_spans_fail() {
        let truth = vec![pt(0.0, Vector3::zeros(), 0.0), pt(1.0, Vector3::zeros(), 0.0)];
        let est = vec![pt(2.0, Vector3::zeros(), 0.0)];
        assert!(matches!(compute_metrics(&est, &truth), Err(MetricsError::NoOverlap { .. })));
        assert_eq!(compute_metrics(&[], &truth), Err(MetricsError::Empty));
    }
}
