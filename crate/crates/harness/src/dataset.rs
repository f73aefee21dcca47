//! On-disk datasets: a directory with `dataset.toml` and `frames.csv`.
//!
//! `dataset.toml` declares units, the array calibration and optionally the
//! map bounds:
//!
//! ```toml
//! name = "corridor"
//! imu_averaged = 1        # IMUs averaged into the ax..gz columns
//! [units]
//! time = "s"              # s | ms
//! acc = "m/s^2"           # m/s^2 | g
//! gyro = "rad/s"          # rad/s | deg/s
//! mag = "uT"              # uT | nT | G
//! baro = "m"              # altitude in metres
//! [array]
//! positions = [[-0.17, -0.12, 0.0], ...]   # body frame, metres
//! [map]
//! min = [-1.0, -1.0, -0.5]
//! max = [6.0, 3.0, 0.5]
//! ```
//!
//! `frames.csv` has the columns `t, ax, ay, az, gx, gy, gz,
//! mag_{i}_{x|y|z}` for `i = 1..N`, `baro`, and optionally `fix_*` pose fixes
//! (`px py pz qw qx qy qz`), `gt_*` ground truth with the same suffixes and raw
//! IMU channels `imu_{j}_{ax|ay|az|gx|gy|gz}`. An empty cell means the
//! quantity is absent at that epoch; a group must be either complete or empty.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use imslam_core::frames::{ArrayGeometry, ImuSample, PoseFix, SensorFrame};
use imslam_core::geom::Quat;
use imslam_core::sim::SyntheticRun;
use imslam_core::trajectory::TrajectoryPoint;
use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const META_FILE: &str = "dataset.toml";
pub const FRAMES_FILE: &str = "frames.csv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("time goes backwards at {file} line {line} (t = {t})")]
    NonMonotoneTime { file: String, line: u64, t: f64 },
    #[error("missing calibration: {0}")]
    MissingCalibration(String),
    #[error("{file} line {line}: {msg}")]
    Parse { file: String, line: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("dataset.toml: {0}")]
    Meta(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Units {
    pub time: String,
    pub acc: String,
    pub gyro: String,
    pub mag: String,
    pub baro: String,
}

impl Default for Units {
    fn default() -> Self {
        Self { time: "s".into(), acc: "m/s^2".into(), gyro: "rad/s".into(), mag: "uT".into(), baro: "m".into() }
    }
}

/// Multipliers to SI units and µT.
#[derive(Debug, Clone, Copy)]
struct Scales {
    time: f64,
    acc: f64,
    gyro: f64,
    mag: f64,
    baro: f64,
}

impl Units {
    fn scales(&self) -> Result<Scales, DatasetError> {
        let bad = |what: &str, v: &str| DatasetError::SchemaMismatch(format!("unknown {what} unit `{v}`"));
        Ok(Scales {
            time: match self.time.as_str() {
                "s" => 1.0,
                "ms" => 1e-3,
                v => return Err(bad("time", v)),
            },
            acc: match self.acc.as_str() {
                "m/s^2" => 1.0,
                "g" => 9.80665,
                v => return Err(bad("acc", v)),
            },
            gyro: match self.gyro.as_str() {
                "rad/s" => 1.0,
                "deg/s" => std::f64::consts::PI / 180.0,
                v => return Err(bad("gyro", v)),
            },
            mag: match self.mag.as_str() {
                "uT" => 1.0,
                "nT" => 1e-3,
                "G" => 100.0,
                v => return Err(bad("mag", v)),
            },
            baro: match self.baro.as_str() {
                "m" => 1.0,
                v => return Err(bad("baro", v)),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayCalibration {
    pub positions: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    #[serde(default = "one")]
    pub imu_averaged: usize,
    #[serde(default)]
    pub units: Units,
    pub array: Option<ArrayCalibration>,
    pub map: Option<MapBounds>,
}

fn one() -> usize {
    1
}

/// A fully loaded dataset in SI units.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub geometry: ArrayGeometry,
    pub frames: Vec<SensorFrame>,
    /// Raw per-IMU channels, one entry per frame with IMU data (may be empty).
    pub raw_imu: Vec<Vec<ImuSample>>,
    pub truth: Vec<TrajectoryPoint>,
}

impl Dataset {
    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    pub fn mag_channels(&self) -> usize {
        self.geometry.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    /// Remove the barometer offset using the first `init_window` seconds.
    pub baro_offset: bool,
    pub init_window: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { baro_offset: true, init_window: 5.0 }
    }
}

/// Column renames applied to a raw header before it is interpreted.
pub type ColumnAliases = BTreeMap<String, String>;

const POSE: [&str; 7] = ["px", "py", "pz", "qw", "qx", "qy", "qz"];
const IMU: [&str; 6] = ["ax", "ay", "az", "gx", "gy", "gz"];

#[derive(Debug)]
struct Layout {
    t: usize,
    imu: Option<[usize; 6]>,
    mag: Vec<[usize; 3]>,
    baro: Option<usize>,
    fix: Option<[usize; 7]>,
    gt: Option<[usize; 7]>,
    raw_imu: Vec<[usize; 6]>,
}

fn group<const N: usize>(cols: &BTreeMap<String, usize>, names: [String; N]) -> Result<Option<[usize; N]>, DatasetError> {
    let found: Vec<Option<usize>> = names.iter().map(|n| cols.get(n).copied()).collect();
    match found.iter().filter(|x| x.is_some()).count() {
        0 => Ok(None),
        k if k == N => Ok(Some(std::array::from_fn(|i| found[i].expect("checked")))),
        _ => Err(DatasetError::SchemaMismatch(format!("incomplete column group {names:?}"))),
    }
}

fn layout(header: &csv::StringRecord, aliases: &ColumnAliases) -> Result<Layout, DatasetError> {
    let mut cols = BTreeMap::new();
    for (i, h) in header.iter().enumerate() {
        let h = h.trim();
        let name = aliases.get(h).cloned().unwrap_or_else(|| h.to_string());
        if cols.insert(name.clone(), i).is_some() {
            return Err(DatasetError::SchemaMismatch(format!("duplicate column `{name}`")));
        }
    }
    let t = *cols.get("t").ok_or_else(|| DatasetError::SchemaMismatch("no `t` column".into()))?;
    let imu = group(&cols, IMU.map(String::from))?;
    let mut mag = Vec::new();
    while let Some(g) = group(&cols, ["x", "y", "z"].map(|a| format!("mag_{}_{a}", mag.len() + 1)))? {
        mag.push(g);
    }
    let mut raw_imu = Vec::new();
    while let Some(g) = group(&cols, IMU.map(|a| format!("imu_{}_{a}", raw_imu.len() + 1)))? {
        raw_imu.push(g);
    }
    let lay = Layout {
        t,
        imu,
        baro: cols.get("baro").copied(),
        fix: group(&cols, POSE.map(|a| format!("fix_{a}")))?,
        gt: group(&cols, POSE.map(|a| format!("gt_{a}")))?,
        mag,
        raw_imu,
    };
    let known = 1
        + lay.imu.map_or(0, |_| 6)
        + 3 * lay.mag.len()
        + usize::from(lay.baro.is_some())
        + lay.fix.map_or(0, |_| 7)
        + lay.gt.map_or(0, |_| 7)
        + 6 * lay.raw_imu.len();
    if known != cols.len() {
        let used: Vec<usize> = std::iter::once(lay.t)
            .chain(lay.imu.into_iter().flatten())
            .chain(lay.mag.iter().flatten().copied())
            .chain(lay.baro)
            .chain(lay.fix.into_iter().flatten())
            .chain(lay.gt.into_iter().flatten())
            .chain(lay.raw_imu.iter().flatten().copied())
            .collect();
        let extra: Vec<&String> = cols.iter().filter(|(_, i)| !used.contains(i)).map(|(n, _)| n).collect();
        return Err(DatasetError::SchemaMismatch(format!("unrecognised columns {extra:?}")));
    }
    Ok(lay)
}

struct Row<'a> {
    rec: &'a csv::StringRecord,
    file: &'a str,
    line: u64,
}

impl Row<'_> {
    fn err(&self, msg: String) -> DatasetError {
        DatasetError::Parse { file: self.file.to_string(), line: self.line, msg }
    }

    fn cell(&self, i: usize) -> Result<Option<f64>, DatasetError> {
        let s = self.rec.get(i).unwrap_or("").trim();
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>().map(Some).map_err(|e| self.err(format!("column {}: {e}", i + 1)))
    }

    fn group<const N: usize>(&self, idx: Option<[usize; N]>, scale: f64) -> Result<Option<[f64; N]>, DatasetError> {
        let Some(idx) = idx else { return Ok(None) };
        let vals = idx.iter().map(|&i| self.cell(i)).collect::<Result<Vec<_>, _>>()?;
        match vals.iter().filter(|v| v.is_some()).count() {
            0 => Ok(None),
            k if k == N => Ok(Some(std::array::from_fn(|i| vals[i].expect("checked") * scale))),
            _ => Err(self.err("partially filled column group".into())),
        }
    }
}

fn imu_from(t: f64, v: [f64; 6], s: &Scales) -> ImuSample {
    ImuSample { t, acc: Vector3::new(v[0], v[1], v[2]) * s.acc, gyro: Vector3::new(v[3], v[4], v[5]) * s.gyro }
}

fn pose_from(v: [f64; 7]) -> (Vector3<f64>, Quat) {
    let q = Quaternion::new(v[3], v[4], v[5], v[6]);
    // leave unit quaternions bit-exact so written datasets read back unchanged
    let q = if (q.norm() - 1.0).abs() < 1e-12 { Quat::new_unchecked(q) } else { Quat::new_normalize(q) };
    (Vector3::new(v[0], v[1], v[2]), q)
}

/// Parse a frames CSV (any reader) with the given metadata and aliases.
pub fn parse_frames<R: std::io::Read>(
    reader: R,
    file: &str,
    meta: &DatasetMeta,
    aliases: &ColumnAliases,
    options: &IngestOptions,
) -> Result<Dataset, DatasetError> {
    let scales = meta.units.scales()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).flexible(false).from_reader(reader);
    let lay = layout(rdr.headers()?, aliases)?;
    let calib = meta.array.as_ref().ok_or_else(|| DatasetError::MissingCalibration("no [array] positions in dataset.toml".into()))?;
    if !lay.mag.is_empty() && calib.positions.len() != lay.mag.len() {
        return Err(DatasetError::MissingCalibration(format!(
            "{} magnetometer channels but {} calibrated positions",
            lay.mag.len(),
            calib.positions.len()
        )));
    }
    let geometry = ArrayGeometry::new(calib.positions.iter().map(|p| Vector3::from(*p)).collect())
        .map_err(|e| DatasetError::MissingCalibration(e.to_string()))?;

    let mut frames = Vec::new();
    let mut raw_imu = Vec::new();
    let mut truth = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        let row = Row { rec: &rec, file, line };
        let t = row.cell(lay.t)?.ok_or_else(|| row.err("missing time".into()))? * scales.time;
        if t < last_t {
            return Err(DatasetError::NonMonotoneTime { file: file.to_string(), line, t });
        }
        last_t = t;
        let imu = row.group(lay.imu, 1.0)?.map(|v| imu_from(t, v, &scales));
        let mut mag = Vec::with_capacity(lay.mag.len());
        for g in &lay.mag {
            if let Some(v) = row.group(Some(*g), scales.mag)? {
                mag.push(Vector3::from(v));
            }
        }
        let mag = match mag.len() {
            0 => None,
            n if n == lay.mag.len() => Some(mag),
            _ => return Err(row.err("some magnetometer channels missing".into())),
        };
        let baro = match lay.baro {
            Some(i) => row.cell(i)?.map(|b| b * scales.baro),
            None => None,
        };
        let pose_fix = row.group(lay.fix, 1.0)?.map(|v| {
            let (position, attitude) = pose_from(v);
            PoseFix { position, attitude }
        });
        if let Some(v) = row.group(lay.gt, 1.0)? {
            let (p, q) = pose_from(v);
            truth.push(TrajectoryPoint::truth(t, p, q));
        }
        if imu.is_some() && !lay.raw_imu.is_empty() {
            let mut chans = Vec::with_capacity(lay.raw_imu.len());
            for g in &lay.raw_imu {
                let v = row.group(Some(*g), 1.0)?.ok_or_else(|| row.err("raw IMU channel missing".into()))?;
                chans.push(imu_from(t, v, &scales));
            }
            raw_imu.push(chans);
        }
        let frame = SensorFrame { t, imu, mag, baro, pose_fix };
        if !frame.has_payload() {
            if truth.last().is_some_and(|g| g.t == t) {
                continue;
            }
            return Err(row.err("row carries no sensor data".into()));
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(DatasetError::SchemaMismatch(format!("{file} has no frames")));
    }
    let mut ds = Dataset { meta: meta.clone(), geometry, frames, raw_imu, truth };
    if options.baro_offset {
        remove_baro_offset(&mut ds.frames, options.init_window);
    }
    Ok(ds)
}

/// Shift barometer altitudes so their mean over the start window equals the
/// starting altitude: the first pose fix in the window, or zero.
pub fn remove_baro_offset(frames: &mut [SensorFrame], window: f64) {
    let Some(t0) = frames.first().map(|f| f.t) else { return };
    let start: Vec<&SensorFrame> = frames.iter().take_while(|f| f.t <= t0 + window).collect();
    let samples: Vec<f64> = start.iter().filter_map(|f| f.baro).collect();
    if samples.is_empty() {
        return;
    }
    let z0 = start.iter().find_map(|f| f.pose_fix.map(|p| p.position.z)).unwrap_or(0.0);
    let offset = samples.iter().sum::<f64>() / samples.len() as f64 - z0;
    for f in frames.iter_mut() {
        if let Some(b) = f.baro.as_mut() {
            *b -= offset;
        }
    }
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta, DatasetError> {
    let text = fs::read_to_string(dir.join(META_FILE))?;
    Ok(toml::from_str(&text)?)
}

/// Load a dataset directory.
pub fn read_dataset(dir: &Path, options: &IngestOptions) -> Result<Dataset, DatasetError> {
    let meta = read_meta(dir)?;
    let file = fs::File::open(dir.join(FRAMES_FILE))?;
    parse_frames(std::io::BufReader::new(file), FRAMES_FILE, &meta, &ColumnAliases::new(), options)
}

fn push_opt(line: &mut String, v: Option<f64>) {
    line.push(',');
    if let Some(v) = v {
        line.push_str(&v.to_string());
    }
}

/// Write a dataset directory in canonical SI units. Floats use shortest
/// round-trip formatting so reading back is lossless.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let mut meta = ds.meta.clone();
    meta.units = Units::default();
    meta.array = Some(ArrayCalibration { positions: ds.geometry.positions().iter().map(|p| [p.x, p.y, p.z]).collect() });
    let text = toml::to_string(&meta).map_err(|e| DatasetError::SchemaMismatch(e.to_string()))?;
    fs::write(dir.join(META_FILE), text)?;

    let n = ds.geometry.len();
    let channels = ds.raw_imu.first().map_or(0, |c| c.len());
    let mut header = vec!["t".to_string()];
    header.extend(IMU.iter().map(|s| s.to_string()));
    for i in 1..=n {
        header.extend(["x", "y", "z"].map(|a| format!("mag_{i}_{a}")));
    }
    header.push("baro".into());
    header.extend(POSE.map(|a| format!("fix_{a}")));
    header.extend(POSE.map(|a| format!("gt_{a}")));
    for j in 1..=channels {
        header.extend(IMU.map(|a| format!("imu_{j}_{a}")));
    }
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join(FRAMES_FILE))?);
    writeln!(w, "{}", header.join(","))?;
    let mut gt = ds.truth.iter().peekable();
    let mut raw = ds.raw_imu.iter();
    let mut line = String::new();
    for f in &ds.frames {
        line.clear();
        line.push_str(&f.t.to_string());
        let imu = f.imu.map(|u| [u.acc.x, u.acc.y, u.acc.z, u.gyro.x, u.gyro.y, u.gyro.z]);
        (0..6).for_each(|i| push_opt(&mut line, imu.map(|v| v[i])));
        for i in 0..n {
            (0..3).for_each(|a| push_opt(&mut line, f.mag.as_ref().map(|m| m[i][a])));
        }
        push_opt(&mut line, f.baro);
        let pose = |p: &Vector3<f64>, q: &Quat| [p.x, p.y, p.z, q.w, q.i, q.j, q.k];
        let fix = f.pose_fix.map(|x| pose(&x.position, &x.attitude));
        (0..7).for_each(|i| push_opt(&mut line, fix.map(|v| v[i])));
        let g = if gt.peek().is_some_and(|g| g.t == f.t) { gt.next().map(|g| pose(&g.position, &g.attitude)) } else { None };
        (0..7).for_each(|i| push_opt(&mut line, g.map(|v| v[i])));
        if channels > 0 {
            let chans = if f.imu.is_some() { raw.next() } else { None };
            for j in 0..channels {
                let v = chans.map(|c| [c[j].acc.x, c[j].acc.y, c[j].acc.z, c[j].gyro.x, c[j].gyro.y, c[j].gyro.z]);
                (0..6).for_each(|i| push_opt(&mut line, v.map(|v| v[i])));
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Convert a raw CSV in a foreign layout into a canonical dataset directory.
pub fn convert(
    input: &Path,
    meta: &DatasetMeta,
    aliases: &ColumnAliases,
    out: &Path,
    options: &IngestOptions,
) -> Result<Dataset, DatasetError> {
    let file = fs::File::open(input)?;
    let name = input.file_name().map_or_else(|| "input".to_string(), |n| n.to_string_lossy().into_owned());
    let ds = parse_frames(std::io::BufReader::new(file), &name, meta, aliases, options)?;
    write_dataset(out, &ds)?;
    Ok(ds)
}

/// Dataset form of a synthetic run. The map bounds are the track widened by
/// the array reach, so a run on the dataset builds the same map domain as a
/// run on the scenario.
pub fn from_synthetic(name: &str, run: &SyntheticRun, imu_averaged: usize) -> Dataset {
    let reach = run.geometry.positions().iter().map(|r| r.norm()).fold(0.0, f64::max);
    let lo = run.truth.iter().fold(Vector3::repeat(f64::INFINITY), |a, s| a.inf(&s.position)) - Vector3::repeat(reach);
    let hi = run.truth.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, s| a.sup(&s.position)) + Vector3::repeat(reach);
    let meta = DatasetMeta {
        name: name.to_string(),
        imu_averaged,
        units: Units::default(),
        array: Some(ArrayCalibration { positions: run.geometry.positions().iter().map(|p| [p.x, p.y, p.z]).collect() }),
        map: Some(MapBounds { min: lo.into(), max: hi.into() }),
    };
    Dataset {
        meta,
        geometry: run.geometry.clone(),
        frames: run.frames.clone(),
        raw_imu: Vec::new(),
        truth: run.truth.iter().map(|s| TrajectoryPoint::truth(s.t, s.position, s.attitude)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(n: usize) -> DatasetMeta {
        DatasetMeta {
            name: "t".into(),
            imu_averaged: 1,
            units: Units::default(),
            array: Some(ArrayCalibration { positions: (0..n).map(|i| [0.1 * i as f64, (i % 2) as f64 * 0.1, 0.0]).collect() }),
            map: None,
        }
    }

    const HEADER: &str = "t,ax,ay,az,gx,gy,gz,mag_1_x,mag_1_y,mag_1_z,mag_2_x,mag_2_y,mag_2_z,mag_3_x,mag_3_y,mag_3_z,baro";

    fn parse(text: &str, n: usize) -> Result<Dataset, DatasetError> {
        parse_frames(text.as_bytes(), "frames.csv", &meta(n), &ColumnAliases::new(), &IngestOptions { baro_offset: false, init_window: 5.0 })
    }

    #[test]
    fn parses_optional_groups() {
        let text = format!("{HEADER}\n0,0,0,9.8,0,0,0,1,2,3,4,5,6,7,8,9,\n0.01,0,0,9.8,0,0,0,,,,,,,,,,1.5\n");
        let ds = parse(&text, 3).unwrap();
        assert_eq!(ds.frames.len(), 2);
        assert_eq!(ds.frames[0].mag.as_ref().unwrap()[2], Vector3::new(7.0, 8.0, 9.0));
        assert!(ds.frames[0].baro.is_none());
        assert!(ds.frames[1].mag.is_none());
        assert_eq!(ds.frames[1].baro, Some(1.5));
    }

    #[test]
    fn out_of_order_time_names_the_line() {
        let text = format!("{HEADER}\n0,0,0,9.8,0,0,0,,,,,,,,,,\n0.02,0,0,9.8,0,0,0,,,,,,,,,,\n0.01,0,0,9.8,0,0,0,,,,,,,,,,\n");
        match parse(&text, 3) {
            Err(DatasetError::NonMonotoneTime { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(parse("t,ax,ay\n0,1,2\n", 3), Err(DatasetError::SchemaMismatch(_))));
        assert!(matches!(parse(&format!("{HEADER},extra\n"), 3), Err(DatasetError::SchemaMismatch(_))));
        assert!(matches!(parse(&format!("{HEADER}\n"), 2), Err(DatasetError::MissingCalibration(_))));
        let partial = format!("{HEADER}\n0,0,0,9.8,0,0,0,1,2,,,,,,,,\n");
        assert!(matches!(parse(&partial, 3), Err(DatasetError::Parse { line: 2, .. })));
    }

    #[test]
    fn units_and_aliases() {
        let mut m = meta(3);
        m.units.acc = "g".into();
        m.units.mag = "nT".into();
        m.units.time = "ms".into();
        let aliases: ColumnAliases = [("time".to_string(), "t".to_string())].into_iter().collect();
        let text = HEADER.replacen("t,", "time,", 1) + "\n10,0,0,1,0,0,0,1000,0,0,0,0,0,0,0,0,\n";
        let ds = parse_frames(text.as_bytes(), "x", &m, &aliases, &IngestOptions::default()).unwrap();
        assert!((ds.frames[0].t - 0.01).abs() < 1e-15);
        assert!((ds.frames[0].imu.unwrap().acc.z - 9.80665).abs() < 1e-12);
        assert!((ds.frames[0].mag.as_ref().unwrap()[0].x - 1.0).abs() < 1e-12);
        m.units.gyro = "furlong".into();
        assert!(matches!(parse_frames(text.as_bytes(), "x", &m, &aliases, &IngestOptions::default()), Err(DatasetError::SchemaMismatch(_))));
    }

    #[test]
    fn baro_offset_uses_start_window() {
        let mut frames: Vec<SensorFrame> = (0..100)
            .map(|k| {
                let mut f = SensorFrame::empty(k as f64 * 0.1);
                f.baro = Some(120.0 + if k % 2 == 0 { 0.1 } else { -0.1 });
                f
            })
            .collect();
        remove_baro_offset(&mut frames, 5.0);
        let start: f64 = frames.iter().take_while(|f| f.t <= 5.0).map(|f| f.baro.unwrap()).sum();
        assert!(start.abs() < 0.2);
        frames[0].pose_fix = Some(PoseFix { position: Vector3::new(0.0, 0.0, 1.0), attitude: Quat::identity() });
        remove_baro_offset(&mut frames, 5.0);
        assert!((frames[10].baro.unwrap() - 1.0).abs() < 0.2);
    }
}
