use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imslam_core::config::SystemConfig;
use imslam_core::frames::ArrayGeometry;
use imslam_core::trajectory::read_trajectory_csv;
use imslam_harness::dataset::{convert, from_synthetic, read_dataset, read_meta, write_dataset, ColumnAliases, IngestOptions};
use imslam_harness::metrics::{compute_metrics, write_error_series};
use imslam_harness::report::run_to_dir;
use imslam_harness::runner::{dataset_input, synthetic_input, PathShape, RunError, RunInput, RunOptions, SyntheticSpec, System};
use imslam_harness::suite::{run_suite, SuiteConfig};

#[derive(Parser)]
#[command(name = "imslam", version, about = "Magnetic-field-aided navigation and SLAM runs, metrics and suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset directory, or convert a raw CSV into one.
    Ingest(IngestArgs),
    /// Synthesize a scenario and write it as a dataset directory.
    Simulate(SimulateArgs),
    /// Run one system and write a run directory.
    Run(RunArgs),
    /// Score an estimated trajectory CSV against a truth trajectory CSV.
    Metrics(MetricsArgs),
    /// Run a suite described by a TOML file.
    Suite(SuiteArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Dataset directory, or a raw frames CSV when `--meta` is given.
    input: PathBuf,
    /// Metadata TOML for a raw CSV (units, array positions, map bounds).
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Column rename applied before parsing, `raw=canonical`. Repeatable.
    #[arg(long = "rename", value_parser = parse_alias)]
    renames: Vec<(String, String)>,
    /// Write the canonical dataset here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep barometer altitudes as recorded.
    #[arg(long)]
    no_baro_offset: bool,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML: a `path` table and an optional `sensors` table.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Averaged IMU count of the synthesized stream.
    #[arg(long)]
    imu_count: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory; without it a synthetic scenario is run.
    #[arg(long, conflicts_with = "scenario")]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value_t = System::Tight)]
    system: System,
    #[arg(long)]
    no_baro: bool,
    #[arg(long)]
    imu_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Filter configuration TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Write the error time series here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SuiteArgs {
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_alias(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(a, b)| (a.trim().to_string(), b.trim().to_string())).ok_or_else(|| format!("expected raw=canonical, got `{s}`"))
}

fn read_config(path: Option<&Path>) -> Result<SystemConfig, RunError> {
    match path {
        None => Ok(SystemConfig::default()),
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| RunError::Config(format!("{}: {e}", p.display()))),
    }
}

fn read_scenario(args: &ScenarioArgs) -> Result<SyntheticSpec, RunError> {
    match &args.scenario {
        None => Ok(SyntheticSpec { path: PathShape::default_loop(), sensors: Default::default() }),
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| RunError::Config(format!("{}: {e}", p.display()))),
    }
}

fn scenario_name(args: &ScenarioArgs) -> String {
    args.scenario.as_ref().and_then(|p| p.file_stem()).map_or_else(|| "loop".to_string(), |s| s.to_string_lossy().into_owned())
}

fn ingest(a: IngestArgs) -> Result<(), RunError> {
    let options = IngestOptions { baro_offset: !a.no_baro_offset, ..Default::default() };
    let ds = match &a.meta {
        Some(meta) => {
            let meta = toml::from_str(&fs::read_to_string(meta)?).map_err(|e| RunError::Config(e.to_string()))?;
            let aliases: ColumnAliases = a.renames.iter().cloned().collect();
            let out = a.out.as_ref().ok_or_else(|| RunError::Config("--out is required when converting".into()))?;
            convert(&a.input, &meta, &aliases, out, &options)?
        }
        None => {
            read_meta(&a.input)?;
            let ds = read_dataset(&a.input, &options)?;
            if let Some(out) = &a.out {
                write_dataset(out, &ds)?;
            }
            ds
        }
    };
    println!(
        "{}: {} frames, {:.2} s, {} magnetometers, {} truth samples",
        ds.meta.name,
        ds.frames.len(),
        ds.duration(),
        ds.mag_channels(),
        ds.truth.len()
    );
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), RunError> {
    let spec = read_scenario(&a.scenario)?;
    let config = read_config(a.config.as_deref())?;
    let scenario = spec.scenario(&config, a.imu_count, a.seed);
    let run = scenario.build(&ArrayGeometry::default_board())?;
    let ds = from_synthetic(&scenario_name(&a.scenario), &run, scenario.sensors.imu_count.max(1));
    write_dataset(&a.out, &ds)?;
    println!("{}: {} frames, {:.2} s written to {}", ds.meta.name, ds.frames.len(), ds.duration(), a.out.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<(), RunError> {
    let config = read_config(a.config.as_deref())?;
    let input: RunInput = match &a.dataset {
        Some(dir) => {
            let ds = read_dataset(dir, &IngestOptions { init_window: config.init.duration, ..Default::default() })?;
            dataset_input(&ds, &config, a.imu_count, a.seed)?
        }
        None => synthetic_input(&scenario_name(&a.scenario), &read_scenario(&a.scenario)?, &config, a.imu_count, a.seed)?,
    };
    let options = RunOptions { system: a.system, baro: !a.no_baro, imu_count: a.imu_count, seed: a.seed };
    let res = run_to_dir(&input, &config, &options, &a.out)?;
    print!("{}", res.report.to_json());
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<(), RunError> {
    let read = |p: &Path| -> Result<_, RunError> {
        read_trajectory_csv(std::io::BufReader::new(fs::File::open(p)?)).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))
    };
    let m = compute_metrics(&read(&a.estimate)?, &read(&a.truth)?)?;
    if let Some(out) = &a.out {
        let mut buf = Vec::new();
        write_error_series(&mut buf, &m.series)?;
        fs::write(out, buf)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "end_horizontal": m.end_horizontal,
            "end_vertical": m.end_vertical,
            "end_yaw_deg": m.end_yaw_deg,
            "end_time": m.end_time,
        })
    );
    Ok(())
}

fn suite(a: SuiteArgs) -> Result<(), RunError> {
    let mut cfg = SuiteConfig::from_toml(&fs::read_to_string(&a.config)?)?;
    cfg.rebase(a.config.parent().unwrap_or(Path::new(".")));
    run_suite(&cfg, Some(&a.out))?;
    print!("{}", fs::read_to_string(a.out.join("tables.md"))?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Simulate(a) => simulate(a),
        Command::Run(a) => run(a),
        Command::Metrics(a) => metrics(a),
        Command::Suite(a) => suite(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
