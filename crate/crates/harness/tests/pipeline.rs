use std::fs;
use std::path::Path;
use std::process::Command;

use imslam_core::config::SystemConfig;
use imslam_core::frames::ArrayGeometry;
use imslam_core::sim::SensorSimConfig;
use imslam_harness::dataset::{
    convert, from_synthetic, read_dataset, write_dataset, ColumnAliases, DatasetError, DatasetMeta, IngestOptions,
};
use imslam_harness::report::{config_fingerprint, execute, run_to_dir};
use imslam_harness::runner::{dataset_input, synthetic_input, PathShape, RunOptions, SyntheticSpec, System};
use imslam_harness::suite::{median, run_suite, summarize, ScenarioSource, SuiteConfig};
use serde_json::Value;

fn short_loop() -> SyntheticSpec {
    SyntheticSpec { path: PathShape::Rectangle { width: 2.0, depth: 2.0, laps: 1, speed: 0.6, dwell: 5.0 }, sensors: SensorSimConfig::default() }
}

fn small_config() -> SystemConfig {
    let mut c = SystemConfig::default();
    c.map.num_modes = 80;
    c
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulated_dataset_round_trips_losslessly() {
    let cfg = small_config();
    let sc = short_loop().scenario(&cfg, None, 11);
    let run = sc.build(&ArrayGeometry::default_board()).unwrap();
    let ds = from_synthetic("loop", &run, 1);
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), &ds).unwrap();
    let back = read_dataset(tmp.path(), &IngestOptions { baro_offset: false, init_window: 5.0 }).unwrap();
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.geometry.positions(), ds.geometry.positions());
    assert_eq!(back.frames.len(), ds.frames.len());
    for (a, b) in back.frames.iter().zip(&ds.frames) {
        assert_eq!(a.t, b.t);
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.mag, b.mag);
        assert_eq!(a.baro, b.baro);
        assert_eq!(a.pose_fix.map(|p| (p.position, p.attitude)), b.pose_fix.map(|p| (p.position, p.attitude)));
    }
    assert_eq!(back.truth, ds.truth);

    // the dataset run builds the same map domain as the synthetic run
    let input = dataset_input(&back, &cfg, None, 0).unwrap();
    assert_eq!(input.domain, run.world.domain);
}

#[test]
fn out_of_order_record_is_reported_by_line() {
    let cfg = small_config();
    let run = short_loop().scenario(&cfg, None, 1).build(&ArrayGeometry::default_board()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), &from_synthetic("loop", &run, 1)).unwrap();
    let path = tmp.path().join("frames.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(100, 101);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match read_dataset(tmp.path(), &IngestOptions::default()) {
        Err(DatasetError::NonMonotoneTime { line, .. }) => assert_eq!(line, 102),
        other => panic!("{other:?}"),
    }
}

#[test]
fn converter_adapts_foreign_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw.csv");
    let mut text = String::from("time_ms,acc_x,acc_y,acc_z,gyr_x,gyr_y,gyr_z");
    for i in 1..=4 {
        text += &format!(",m{i}x,m{i}y,m{i}z");
    }
    text += ",alt\n";
    for k in 0..20 {
        text += &format!("{},0,0,1,0,0,0", k * 10);
        for i in 0..4 {
            text += &format!(",{},{},{}", 20000 + i * 1000, -5000, 40000);
        }
        text += &format!(",{}\n", 101.5 + 0.0 * k as f64);
    }
    fs::write(&raw, text).unwrap();
    let meta: DatasetMeta = toml::from_str(
        r#"
name = "foreign"
[units]
time = "ms"
acc = "g"
mag = "nT"
[array]
positions = [[0.1, 0.1, 0.0], [-0.1, 0.1, 0.0], [-0.1, -0.1, 0.0], [0.1, -0.1, 0.0]]
"#,
    )
    .unwrap();
    let mut aliases = ColumnAliases::new();
    for (a, b) in [("time_ms", "t"), ("acc_x", "ax"), ("acc_y", "ay"), ("acc_z", "az"), ("gyr_x", "gx"), ("gyr_y", "gy"), ("gyr_z", "gz"), ("alt", "baro")] {
        aliases.insert(a.into(), b.into());
    }
    for i in 1..=4 {
        for a in ["x", "y", "z"] {
            aliases.insert(format!("m{i}{a}"), format!("mag_{i}_{a}"));
        }
    }
    let out = tmp.path().join("ds");
    let ds = convert(&raw, &meta, &aliases, &out, &IngestOptions::default()).unwrap();
    assert_eq!(ds.mag_channels(), 4);
    assert!((ds.duration() - 0.19).abs() < 1e-12);
    assert!((ds.frames[0].mag.as_ref().unwrap()[1].x - 21.0).abs() < 1e-12);
    // offset removed: no pose fix, so the start altitude is zero
    assert!(ds.frames[3].baro.unwrap().abs() < 1e-9);
    let back = read_dataset(&out, &IngestOptions { baro_offset: false, ..Default::default() }).unwrap();
    assert_eq!(back.frames[5].imu, ds.frames[5].imu);
    assert_eq!(back.meta.units.acc, "m/s^2");
}

#[test]
fn run_directory_is_byte_identical_across_executions() {
    let cfg = small_config();
    let input = synthetic_input("loop", &short_loop(), &cfg, None, 3).unwrap();
    for system in [System::Mains, System::Loose, System::Tight] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let opts = RunOptions { system, baro: true, imu_count: None, seed: 3 };
        let ra = run_to_dir(&input, &cfg, &opts, a.path()).unwrap();
        run_to_dir(&input, &cfg, &opts, b.path()).unwrap();
        let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
        assert_eq!(fa, fb, "{system:?}");
        let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
        for f in ["manifest.json", "report.json", "trajectory.csv", "errors.csv", "truth.csv", "config.toml"] {
            assert!(names.contains(&f), "{system:?} lacks {f}");
        }
        assert_eq!(names.contains(&"map.csv"), system != System::Mains);
        assert_eq!(names.contains(&"jumps.csv"), system == System::Tight);
        let r = &ra.report;
        for v in [r.end_horizontal, r.end_vertical, r.end_yaw_deg] {
            assert!(v.unwrap().is_finite() && v.unwrap() >= 0.0);
        }
    }
}

fn perturb_leaves(v: &Value, path: &str, out: &mut Vec<(String, Value)>, root: &Value) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                perturb_leaves(x, &format!("{path}/{k}"), out, root);
            }
        }
        Value::Number(_) | Value::Bool(_) | Value::Null => {
            let mut changed = root.clone();
            let slot = changed.pointer_mut(path).unwrap();
            *slot = match v {
                Value::Bool(b) => Value::Bool(!b),
                Value::Null => serde_json::json!(9.0),
                Value::Number(n) if n.is_u64() => serde_json::json!(n.as_u64().unwrap().saturating_add(1).min(u64::MAX - 1)),
                Value::Number(n) => serde_json::json!(n.as_f64().unwrap() * 1.001 + 1e-9),
                _ => unreachable!(),
            };
            out.push((path.to_string(), changed));
        }
        _ => {}
    }
}

#[test]
fn fingerprint_changes_with_every_parameter() {
    let base = SystemConfig::default();
    let opts = RunOptions::new(System::Tight);
    let fp = config_fingerprint(&base, &opts, 1);
    assert_eq!(fp, config_fingerprint(&base, &opts, 1));
    let root = serde_json::to_value(base).unwrap();
    let mut variants = Vec::new();
    perturb_leaves(&root, "", &mut variants, &root);
    assert!(variants.len() > 30);
    for (path, v) in variants {
        let cfg: SystemConfig = serde_json::from_value(v).unwrap();
        assert_ne!(config_fingerprint(&cfg, &opts, 1), fp, "{path}");
    }
    for o in [
        RunOptions { baro: false, ..opts },
        RunOptions { seed: 1, ..opts },
        RunOptions { system: System::Loose, ..opts },
        RunOptions { imu_count: Some(1), ..opts },
    ] {
        assert_ne!(config_fingerprint(&base, &o, 1), fp);
    }
    assert_ne!(config_fingerprint(&base, &opts, 2), fp);
}

#[test]
fn suite_on_one_loop_gives_three_rows_and_repeats_exactly() {
    let cfg = SuiteConfig {
        systems: vec![System::Mains, System::Loose, System::Tight],
        baro: vec![true],
        imu_counts: vec![],
        seeds: vec![5],
        config: small_config(),
        scenarios: vec![ScenarioSource::Synthetic { name: "loop".into(), path: short_loop().path, sensors: SensorSimConfig::default() }],
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let res = run_suite(&cfg, Some(a.path())).unwrap();
    run_suite(&cfg, Some(b.path())).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(summarize(&res).len(), 3);
    let summary = fs::read_to_string(a.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    let tables = fs::read_to_string(a.path().join("tables.md")).unwrap();
    assert!(tables.contains("| loop |"));
    assert!(tables.contains("IM-SLAM (tight)"));
    let boxplot = fs::read_to_string(a.path().join("boxplot.csv")).unwrap();
    assert_eq!(boxplot.lines().count(), 1 + 3 * 3);
    // the suite cells equal standalone runs
    let input = synthetic_input("loop", &short_loop(), &small_config(), None, 5).unwrap();
    let solo = execute(&input, &small_config(), &RunOptions { system: System::Tight, baro: true, imu_count: None, seed: 5 }).unwrap();
    assert_eq!(res.cells[2].1, solo.report);
}

#[test]
fn removing_the_barometer_worsens_altitude_on_a_climb() {
    let cfg = small_config();
    let spec = SyntheticSpec { path: PathShape::Spiral { radius: 1.5, climb: 3.0, turns: 2.0, speed: 0.6, dwell: 5.0 }, sensors: SensorSimConfig::default() };
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let input = synthetic_input("spiral", &spec, &cfg, None, seed).unwrap();
        for (baro, out) in [(true, &mut with), (false, &mut without)] {
            let r = execute(&input, &cfg, &RunOptions { system: System::Mains, baro, imu_count: None, seed }).unwrap();
            out.push(r.report.end_vertical.unwrap());
        }
    }
    let (w, wo) = (median(&with).unwrap(), median(&without).unwrap());
    assert!(w <= wo, "with {w} without {wo}");
}

fn ins_drift(spec: &SyntheticSpec, k: usize) -> f64 {
    let cfg = small_config();
    let errs: Vec<f64> = (0..5)
        .map(|seed| {
            let input = synthetic_input("line", spec, &cfg, Some(k), seed).unwrap();
            execute(&input, &cfg, &RunOptions { system: System::Ins, baro: false, imu_count: Some(k), seed }).unwrap().report.end_horizontal.unwrap()
        })
        .collect();
    median(&errs).unwrap()
}

#[test]
fn inertial_drift_falls_with_averaged_imu_count() {
    let mut sensors = SensorSimConfig::default();
    sensors.acc_bias_std = 0.0;
    sensors.gyro_bias_std = 0.0;
    let spec = SyntheticSpec { path: PathShape::Corridor { length: 10.0, passes: 2, speed: 0.8, dwell: 5.0 }, sensors };
    let drift: Vec<f64> = [1, 4, 16].iter().map(|&k| ins_drift(&spec, k)).collect();
    assert!(drift[0] > drift[1] && drift[1] > drift[2], "{drift:?}");
}

#[test]
fn emulated_imu_counts_on_a_dataset_order_drift() {
    let cfg = small_config();
    let mut sensors = SensorSimConfig::default();
    sensors.acc_bias_std = 0.0;
    sensors.gyro_bias_std = 0.0;
    sensors.imu_count = 16;
    let spec = SyntheticSpec { path: PathShape::Corridor { length: 10.0, passes: 2, speed: 0.8, dwell: 5.0 }, sensors };
    let mut drift = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..5 {
        let run = spec.scenario(&cfg, None, seed).build(&ArrayGeometry::default_board()).unwrap();
        let ds = from_synthetic("line", &run, 16);
        for (i, k) in [1, 4, 16].into_iter().enumerate() {
            let input = dataset_input(&ds, &cfg, Some(k), seed).unwrap();
            assert_eq!(input.imu_count, k);
            let r = execute(&input, &cfg, &RunOptions { system: System::Ins, baro: false, imu_count: Some(k), seed }).unwrap();
            drift[i].push(r.report.end_horizontal.unwrap());
        }
    }
    let m: Vec<f64> = drift.iter().map(|d| median(d).unwrap()).collect();
    assert!(m[0] > m[1] && m[1] > m[2], "{m:?}");
    assert!(dataset_input(&from_synthetic("x", &spec.scenario(&cfg, None, 0).build(&ArrayGeometry::default_board()).unwrap(), 16), &cfg, Some(32), 0).is_err());
}

#[test]
fn cli_verbs_work_end_to_end() {
    let exe = env!("CARGO_BIN_EXE_imslam");
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    fs::write(t.join("small.toml"), "[path]\nshape = \"rectangle\"\nwidth = 2.0\ndepth = 2.0\nlaps = 1\nspeed = 0.6\ndwell = 5.0\n").unwrap();
    fs::write(t.join("cfg.toml"), "[map]\nnum_modes = 80\n").unwrap();
    let ok = |args: &[&str]| {
        let out = Command::new(exe).args(args).current_dir(t).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["simulate", "--scenario", "small.toml", "--config", "cfg.toml", "--seed", "2", "--out", "ds"]);
    assert!(ok(&["ingest", "ds"]).contains("30 magnetometers"));
    let report = ok(&["run", "--dataset", "ds", "--system", "mains", "--no-baro", "--config", "cfg.toml", "--out", "run1"]);
    let v: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["system"], "mains");
    assert_eq!(v["baro"], false);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(t.join("run1/manifest.json")).unwrap()).unwrap();
    assert!(manifest["files"].as_array().unwrap().iter().any(|f| f["file"] == "trajectory.csv"));
    let m = ok(&["metrics", "--estimate", "run1/trajectory.csv", "--truth", "run1/truth.csv", "--out", "err.csv"]);
    let mv: Value = serde_json::from_str(&m).unwrap();
    assert_eq!(mv["end_horizontal"], v["end_horizontal"]);
    ok(&["run", "--scenario", "small.toml", "--system", "tight", "--imu-count", "2", "--seed", "1", "--config", "cfg.toml", "--out", "run2"]);
    fs::write(
        t.join("suite.toml"),
        "systems = [\"mains\"]\nseeds = [1]\n[config.map]\nnum_modes = 80\n[[scenario]]\nname = \"ds\"\nkind = \"dataset\"\ndir = \"ds\"\n",
    )
    .unwrap();
    let tables = ok(&["suite", "suite.toml", "--out", "suite"]);
    assert!(tables.contains("| ds |"));
    let bad = Command::new(exe).args(["run", "--dataset", "missing", "--out", "x"]).current_dir(t).output().unwrap();
    assert!(!bad.status.success());
}
