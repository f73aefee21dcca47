//! Run reports and the per-run output directory.

use std::fs;
use std::io::Write;
use std::path::Path;

use imslam_core::config::SystemConfig;
use imslam_core::mag_global::export_map;
use imslam_core::mains::{write_odometry, UpdateCounts};
use imslam_core::slam_tight::{position_jump_metric, JumpStats};
use imslam_core::trajectory::write_trajectory_csv;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{compute_metrics, write_error_series, Metrics};
use crate::runner::{effective_config, run_system, RunError, RunInput, RunOptions, SystemOutput};

pub const TOOL: &str = concat!("imslam ", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    config: &'a SystemConfig,
    options: &'a RunOptions,
    imu_count: usize,
}

/// Hash of everything that affects estimation: the effective filter config
/// and the run options.
pub fn config_fingerprint(config: &SystemConfig, options: &RunOptions, imu_count: usize) -> String {
    let json = serde_json::to_vec(&FingerprintInput { config, options, imu_count }).expect("config serializes");
    sha256_hex(&json)
}

/// Work done by the filter; deterministic, unlike wall time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: usize,
    pub epochs: usize,
    pub propagations: usize,
    pub mag_updates: usize,
    pub fused_updates: usize,
    pub baro_updates: usize,
    pub pose_fix_updates: usize,
    pub skipped_updates: usize,
    pub out_of_domain_updates: usize,
    pub duration: f64,
}

impl RunStats {
    fn new(input: &RunInput, out: &SystemOutput) -> Self {
        let c: UpdateCounts = out.counts;
        let duration = match (input.frames.first(), input.frames.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        };
        Self {
            frames: input.frames.len(),
            epochs: out.trajectory.len(),
            propagations: c.propagations,
            mag_updates: c.mag,
            fused_updates: c.fused,
            baro_updates: c.baro,
            pose_fix_updates: c.pose_fix,
            skipped_updates: c.skipped,
            out_of_domain_updates: out.out_of_domain_updates,
            duration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJumps {
    pub fused_count: usize,
    pub fused_median: f64,
    pub ordinary_count: usize,
    pub ordinary_median: f64,
}

impl From<JumpStats> for ReportJumps {
    fn from(s: JumpStats) -> Self {
        Self { fused_count: s.fused.count, fused_median: s.fused.median, ordinary_count: s.ordinary.count, ordinary_median: s.ordinary.median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub input: String,
    pub system: String,
    pub baro: bool,
    pub imu_count: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    /// End errors; absent when the input has no ground truth.
    pub end_horizontal: Option<f64>,
    pub end_vertical: Option<f64>,
    pub end_yaw_deg: Option<f64>,
    pub end_time: Option<f64>,
    pub stats: RunStats,
    pub jumps: Option<ReportJumps>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// A finished run held in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: RunReport,
    pub config: SystemConfig,
    pub output: SystemOutput,
    pub metrics: Option<Metrics>,
}

/// Run one system over a prepared input and score it against the input's truth.
pub fn execute(input: &RunInput, base: &SystemConfig, options: &RunOptions) -> Result<RunResult, RunError> {
    let config = effective_config(base, options, input.imu_count);
    let output = run_system(options.system, input, &config)?;
    let metrics = if input.truth.is_empty() { None } else { Some(compute_metrics(&output.trajectory, &input.truth)?) };
    let jumps = (!output.jumps.is_empty()).then(|| position_jump_metric(&output.jumps).into());
    let report = RunReport {
        tool: TOOL.to_string(),
        input: input.name.clone(),
        system: options.system.name().to_string(),
        baro: config.filter.use_baro,
        imu_count: input.imu_count,
        seed: options.seed,
        config_fingerprint: config_fingerprint(&config, options, input.imu_count),
        end_horizontal: metrics.as_ref().map(|m| m.end_horizontal),
        end_vertical: metrics.as_ref().map(|m| m.end_vertical),
        end_yaw_deg: metrics.as_ref().map(|m| m.end_yaw_deg),
        end_time: metrics.as_ref().map(|m| m.end_time),
        stats: RunStats::new(input, &output),
        jumps,
    };
    Ok(RunResult { report, config, output, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub kind: String,
    pub files: Vec<ManifestEntry>,
}

/// Collects files written into an output directory for the manifest.
pub struct OutputDir<'a> {
    root: &'a Path,
    entries: Vec<ManifestEntry>,
}

impl<'a> OutputDir<'a> {
    pub fn create(root: &'a Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root, entries: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let path = self.root.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.entries.push(ManifestEntry { file: name.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// Write through a closure that fills a buffer.
    pub fn write_with<E: From<std::io::Error>>(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>) -> Result<(), E> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)?;
        Ok(())
    }

    /// Write `manifest.json` listing everything written so far.
    pub fn finish(mut self, kind: &str) -> std::io::Result<Manifest> {
        self.entries.sort_by(|a, b| a.file.cmp(&b.file));
        let manifest = Manifest { tool: TOOL.to_string(), kind: kind.to_string(), files: self.entries };
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        fs::write(self.root.join("manifest.json"), json)?;
        Ok(manifest)
    }
}

/// Write a run's files into `out`, under `prefix` (empty for the root).
pub fn write_run_files(out: &mut OutputDir, prefix: &str, input: &RunInput, result: &RunResult) -> Result<(), RunError> {
    let name = |f: &str| if prefix.is_empty() { f.to_string() } else { format!("{prefix}/{f}") };
    out.write(&name("report.json"), result.report.to_json().as_bytes())?;
    let cfg = toml::to_string(&result.config).map_err(|e| RunError::Config(e.to_string()))?;
    out.write(&name("config.toml"), cfg.as_bytes())?;
    out.write_with(&name("trajectory.csv"), |b| write_trajectory_csv(b, &result.output.trajectory))?;
    if !input.truth.is_empty() {
        out.write_with(&name("truth.csv"), |b| write_trajectory_csv(b, &input.truth))?;
    }
    if let Some(m) = &result.metrics {
        out.write_with(&name("errors.csv"), |b| write_error_series(b, &m.series))?;
    }
    if !result.output.odometry.is_empty() {
        out.write_with(&name("odometry.csv"), |b| write_odometry(b, &result.output.odometry))?;
    }
    if let Some((eta, var)) = &result.output.map {
        out.write_with::<RunError>(&name("map.csv"), |b| Ok(export_map(b, &input.domain, eta, var)?))?;
    }
    if !result.output.jumps.is_empty() {
        out.write_with(&name("jumps.csv"), |b| {
            writeln!(b, "t,fused,magnitude")?;
            for j in &result.output.jumps {
                writeln!(b, "{},{},{}", j.t, u8::from(j.fused), j.magnitude)?;
            }
            Ok::<(), std::io::Error>(())
        })?;
    }
    Ok(())
}

/// Run and write a complete run directory with its manifest.
pub fn run_to_dir(input: &RunInput, base: &SystemConfig, options: &RunOptions, dir: &Path) -> Result<RunResult, RunError> {
    let result = execute(input, base, options)?;
    let mut out = OutputDir::create(dir)?;
    write_run_files(&mut out, "", input, &result)?;
    out.finish("run")?;
    Ok(result)
}
