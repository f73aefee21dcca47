//! Dataset ingestion, run orchestration, metrics and export for the
//! navigation and SLAM filters in `imslam-core`.

pub mod dataset;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod suite;
