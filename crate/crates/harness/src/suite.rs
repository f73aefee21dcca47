//! Experiment suites: systems × barometer × IMU count × seeds over a list
//! of scenarios, run in parallel and reduced in a fixed order.
//!
//! ```toml
//! systems = ["mains", "loose", "tight"]
//! baro = [true, false]
//! imu_counts = [1]
//! seeds = [1, 2, 3]
//!
//! [config]            # filter settings, same schema as `run --config`
//! filter.switch_period = 100
//!
//! [[scenario]]
//! name = "loop"
//! kind = "synthetic"
//! path = { shape = "rectangle", width = 5.0, depth = 2.0, laps = 6, speed = 0.8, dwell = 5.0 }
//!
//! [[scenario]]
//! name = "LC-2"
//! kind = "dataset"
//! dir = "data/long-corridor-2"
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use imslam_core::config::SystemConfig;
use imslam_core::sim::SensorSimConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_dataset, Dataset, IngestOptions};
use crate::report::{execute, write_run_files, OutputDir, RunReport};
use crate::runner::{dataset_input, synthetic_input, PathShape, RunError, RunInput, RunOptions, SyntheticSpec, System};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScenarioSource {
    Synthetic {
        name: String,
        path: PathShape,
        #[serde(default)]
        sensors: SensorSimConfig,
    },
    Dataset {
        name: String,
        dir: PathBuf,
    },
}

impl ScenarioSource {
    pub fn name(&self) -> &str {
        match self {
            ScenarioSource::Synthetic { name, .. } | ScenarioSource::Dataset { name, .. } => name,
        }
    }
}

fn default_systems() -> Vec<System> {
    vec![System::Mains, System::Loose, System::Tight]
}

fn default_baro() -> Vec<bool> {
    vec![true]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "default_systems")]
    pub systems: Vec<System>,
    #[serde(default = "default_baro")]
    pub baro: Vec<bool>,
    /// Averaged IMU counts; empty keeps each input as recorded.
    #[serde(default)]
    pub imu_counts: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub config: SystemConfig,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<ScenarioSource>,
}

impl SuiteConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        if cfg.scenarios.is_empty() || cfg.systems.is_empty() || cfg.baro.is_empty() || cfg.seeds.is_empty() {
            return Err(RunError::Config("suite needs at least one scenario, system, baro setting and seed".into()));
        }
        Ok(cfg)
    }

    /// Resolve dataset directories relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        for s in &mut self.scenarios {
            if let ScenarioSource::Dataset { dir, .. } = s {
                if dir.is_relative() {
                    *dir = base.join(&*dir);
                }
            }
        }
    }
}

/// One cell of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub scenario: String,
    pub system: System,
    pub baro: bool,
    pub imu_count: Option<usize>,
    pub seed: u64,
}

impl CellKey {
    pub fn dir_name(&self) -> String {
        let imu = self.imu_count.map_or_else(|| "rec".to_string(), |k| k.to_string());
        let baro = if self.baro { "baro" } else { "nobaro" };
        format!("{}_{}_{baro}_imu{imu}_seed{}", sanitize(&self.scenario), self.system.name(), self.seed)
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub cells: Vec<(CellKey, RunReport)>,
}

/// Inputs shared by all cells with the same scenario, IMU count and seed.
struct InputGroup {
    scenario: String,
    imu_count: Option<usize>,
    seed: u64,
    input: RunInput,
}

fn load_datasets(cfg: &SuiteConfig) -> Result<Vec<Option<Dataset>>, RunError> {
    cfg.scenarios
        .iter()
        .map(|s| match s {
            ScenarioSource::Dataset { dir, .. } => Ok(Some(read_dataset(dir, &IngestOptions { init_window: cfg.config.init.duration, ..Default::default() })?)),
            ScenarioSource::Synthetic { .. } => Ok(None),
        })
        .collect()
}

/// Run every cell. With `out` set, each cell's run files go to
/// `out/cells/<cell>/` and the tables next to them, under one manifest.
pub fn run_suite(cfg: &SuiteConfig, out: Option<&Path>) -> Result<SuiteResult, RunError> {
    let datasets = load_datasets(cfg)?;
    let imu: Vec<Option<usize>> = if cfg.imu_counts.is_empty() { vec![None] } else { cfg.imu_counts.iter().map(|k| Some(*k)).collect() };
    let mut jobs = Vec::new();
    for (si, s) in cfg.scenarios.iter().enumerate() {
        for k in &imu {
            for seed in &cfg.seeds {
                jobs.push((si, s, *k, *seed));
            }
        }
    }
    let groups: Vec<InputGroup> = jobs
        .par_iter()
        .map(|&(si, s, k, seed)| {
            let input = match s {
                ScenarioSource::Synthetic { name, path, sensors } => {
                    synthetic_input(name, &SyntheticSpec { path: path.clone(), sensors: *sensors }, &cfg.config, k, seed)?
                }
                ScenarioSource::Dataset { .. } => dataset_input(datasets[si].as_ref().expect("loaded"), &cfg.config, k, seed)?,
            };
            Ok(InputGroup { scenario: s.name().to_string(), imu_count: k, seed, input })
        })
        .collect::<Result<_, RunError>>()?;

    let mut cells = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for sys in &cfg.systems {
            for baro in &cfg.baro {
                let key = CellKey { scenario: g.scenario.clone(), system: *sys, baro: *baro, imu_count: g.imu_count, seed: g.seed };
                cells.push((gi, key));
            }
        }
    }
    let results: Vec<_> = cells
        .par_iter()
        .map(|(gi, key)| {
            let options = RunOptions { system: key.system, baro: key.baro, imu_count: key.imu_count, seed: key.seed };
            execute(&groups[*gi].input, &cfg.config, &options)
        })
        .collect::<Result<_, RunError>>()?;

    if let Some(dir) = out {
        let mut od = OutputDir::create(dir)?;
        for ((gi, key), res) in cells.iter().zip(&results) {
            write_run_files(&mut od, &format!("cells/{}", key.dir_name()), &groups[*gi].input, res)?;
        }
        let summary = SuiteResult { cells: cells.iter().map(|(_, k)| k.clone()).zip(results.iter().map(|r| r.report.clone())).collect() };
        od.write("cells.csv", cells_csv(&summary).as_bytes())?;
        od.write("summary.csv", summary_csv(&summary).as_bytes())?;
        od.write("boxplot.csv", boxplot_csv(&summary).as_bytes())?;
        od.write("tables.md", tables_md(&summary).as_bytes())?;
        let suite_toml = toml::to_string(cfg).map_err(|e| RunError::Config(e.to_string()))?;
        od.write("suite.toml", suite_toml.as_bytes())?;
        od.finish("suite")?;
        return Ok(summary);
    }
    Ok(SuiteResult { cells: cells.into_iter().map(|(_, k)| k).zip(results.into_iter().map(|r| r.report)).collect() })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn imu_label(k: Option<usize>) -> String {
    k.map_or_else(|| "recorded".to_string(), |k| k.to_string())
}

pub fn cells_csv(r: &SuiteResult) -> String {
    let mut s = String::from("scenario,system,baro,imu_count,seed,end_horizontal,end_vertical,end_yaw_deg,fingerprint\n");
    for (k, rep) in &r.cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            k.scenario,
            k.system.name(),
            k.baro,
            rep.imu_count,
            k.seed,
            fmt_opt(rep.end_horizontal),
            fmt_opt(rep.end_vertical),
            fmt_opt(rep.end_yaw_deg),
            rep.config_fingerprint
        );
    }
    s
}

/// Long-format end errors, one row per cell and metric, for box plots.
pub fn boxplot_csv(r: &SuiteResult) -> String {
    let mut s = String::from("scenario,system,baro,imu_count,seed,metric,value\n");
    for (k, rep) in &r.cells {
        for (metric, v) in [("horizontal", rep.end_horizontal), ("vertical", rep.end_vertical), ("yaw_deg", rep.end_yaw_deg)] {
            if let Some(v) = v {
                let _ = writeln!(s, "{},{},{},{},{},{metric},{v}", k.scenario, k.system.name(), k.baro, rep.imu_count, k.seed);
            }
        }
    }
    s
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub scenario: String,
    pub system: System,
    pub baro: bool,
    pub imu_count: Option<usize>,
    pub runs: usize,
    pub horizontal: Option<f64>,
    pub vertical: Option<f64>,
    pub yaw_deg: Option<f64>,
}

/// Median end errors over seeds for each (scenario, system, baro, IMU count),
/// in first-appearance order.
pub fn summarize(r: &SuiteResult) -> Vec<GroupSummary> {
    let mut keys: Vec<(String, System, bool, Option<usize>)> = Vec::new();
    for (k, _) in &r.cells {
        let key = (k.scenario.clone(), k.system, k.baro, k.imu_count);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(scenario, system, baro, imu_count)| {
            let reps: Vec<&RunReport> = r
                .cells
                .iter()
                .filter(|(k, _)| k.scenario == scenario && k.system == system && k.baro == baro && k.imu_count == imu_count)
                .map(|(_, rep)| rep)
                .collect();
            let col = |f: fn(&RunReport) -> Option<f64>| median(&reps.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            GroupSummary {
                runs: reps.len(),
                horizontal: col(|r| r.end_horizontal),
                vertical: col(|r| r.end_vertical),
                yaw_deg: col(|r| r.end_yaw_deg),
                scenario,
                system,
                baro,
                imu_count,
            }
        })
        .collect()
}

pub fn summary_csv(r: &SuiteResult) -> String {
    let mut s = String::from("scenario,system,baro,imu_count,runs,median_horizontal,median_vertical,median_yaw_deg\n");
    for g in summarize(r) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            g.scenario,
            g.system.name(),
            g.baro,
            imu_label(g.imu_count),
            g.runs,
            fmt_opt(g.horizontal),
            fmt_opt(g.vertical),
            fmt_opt(g.yaw_deg)
        );
    }
    s
}

/// Markdown tables with scenarios as rows and systems as columns: end
/// horizontal (vertical) error in metres, and end yaw error in degrees, one
/// pair per barometer setting and IMU count. Entries are medians over seeds.
pub fn tables_md(r: &SuiteResult) -> String {
    let groups = summarize(r);
    let mut systems: Vec<System> = groups.iter().map(|g| g.system).collect();
    systems.sort();
    systems.dedup();
    let mut scenarios: Vec<&str> = Vec::new();
    let mut settings: Vec<(bool, Option<usize>)> = Vec::new();
    for g in &groups {
        if !scenarios.contains(&g.scenario.as_str()) {
            scenarios.push(&g.scenario);
        }
        if !settings.contains(&(g.baro, g.imu_count)) {
            settings.push((g.baro, g.imu_count));
        }
    }
    let find = |sc: &str, sys: System, baro: bool, k: Option<usize>| {
        groups.iter().find(|g| g.scenario == sc && g.system == sys && g.baro == baro && g.imu_count == k)
    };
    let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    let mut s = String::new();
    for (baro, k) in settings {
        let cond = format!("{} barometer, IMU count {}", if baro { "with" } else { "without" }, imu_label(k));
        let header = |s: &mut String| {
            let _ = writeln!(s, "| |{}|", systems.iter().map(|x| format!(" {} ", x.label())).collect::<Vec<_>>().join("|"));
            let _ = writeln!(s, "|---|{}|", systems.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
        };
        let _ = writeln!(s, "### Horizontal (vertical) end error, {cond}. Unit: m\n");
        header(&mut s);
        for sc in &scenarios {
            let row: Vec<String> = systems
                .iter()
                .map(|sys| find(sc, *sys, baro, k).map_or_else(|| "-".to_string(), |g| format!("{} ({})", num(g.horizontal), num(g.vertical))))
                .collect();
            let _ = writeln!(s, "| {sc} | {} |", row.join(" | "));
        }
        let _ = writeln!(s, "\n### Yaw end error, {cond}. Unit: degree\n");
        header(&mut s);
        for sc in &scenarios {
            let row: Vec<String> = systems.iter().map(|sys| find(sc, *sys, baro, k).map_or_else(|| "-".to_string(), |g| num(g.yaw_deg))).collect();
            let _ = writeln!(s, "| {sc} | {} |", row.join(" | "));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example() {
        let text = r#"
systems = ["mains", "loose", "tight"]
baro = [true, false]
imu_counts = [1]
seeds = [1, 2, 3]

[config]
filter.switch_period = 100

[[scenario]]
name = "loop"
kind = "synthetic"
path = { shape = "rectangle", width = 5.0, depth = 2.0, laps = 6, speed = 0.8, dwell = 5.0 }

[[scenario]]
name = "LC-2"
kind = "dataset"
dir = "data/long-corridor-2"
"#;
        let mut cfg = SuiteConfig::from_toml(text).unwrap();
        assert_eq!(cfg.scenarios.len(), 2);
        assert_eq!(cfg.config.filter.switch_period, 100);
        cfg.rebase(Path::new("/x"));
        assert!(matches!(&cfg.scenarios[1], ScenarioSource::Dataset { dir, .. } if dir == Path::new("/x/data/long-corridor-2")));
        assert!(SuiteConfig::from_toml("systems = [\"mains\"]\nscenario = []\n").is_err());
        assert!(SuiteConfig::from_toml("bogus = 1\n[[scenario]]\nname='a'\nkind='dataset'\ndir='d'\n").is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
