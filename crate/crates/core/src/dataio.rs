//! Dataset persistence, KITTI tracking-label ingestion and metric reports.
//!
//! Native dataset layout:
//!
//! ```text
//! <root>/manifest.json       schema version, seed, tracklet records, boxes
//! <root>/frames/<id>_<t>.bin little-endian f32 × 3 per point
//! ```
//!
//! KITTI velodyne frames carry four f32 values per point (x, y, z, reflectance).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Box3D, PointCloud, Vec3};
use crate::synth::{Frame, Tracklet};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_DIR: &str = "frames";

const NATIVE_RECORD: usize = 12;
const KITTI_RECORD: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: schema version {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: corrupt frame ({len} bytes is not a multiple of {record}, or point count disagrees)")]
    CorruptFrame { path: PathBuf, len: u64, record: usize },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed label line at field {field}: {reason}")]
    MalformedLine { field: usize, reason: String },
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error("no tracklet {index} in split {split}")]
    NoSuchTracklet { split: Split, index: usize },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    /// Relative to the dataset root.
    pub file: String,
    pub points: usize,
    pub gt: Box3D,
    pub sensor: Vec3,
    pub fg_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletRecord {
    pub id: String,
    pub category: String,
    pub observed: bool,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub observed: Vec<String>,
    pub unseen: String,
    pub splits: BTreeMap<Split, Vec<TrackletRecord>>,
    /// split → category → tracklet count
    pub counts: BTreeMap<Split, BTreeMap<String, usize>>,
}

impl DatasetManifest {
    /// Groups records by split, keeping their given order.
    pub fn assemble(seed: u64, observed: &[String], unseen: &str, records: Vec<(Split, TrackletRecord)>) -> Self {
        let mut splits: BTreeMap<Split, Vec<TrackletRecord>> = BTreeMap::new();
        let mut counts: BTreeMap<Split, BTreeMap<String, usize>> = BTreeMap::new();
        for (split, rec) in records {
            *counts.entry(split).or_default().entry(rec.category.clone()).or_default() += 1;
            splits.entry(split).or_default().push(rec);
        }
        Self { schema_version: SCHEMA_VERSION, seed, observed: observed.to_vec(), unseen: unseen.to_string(), splits, counts }
    }

    pub fn tracklets(&self, split: Split) -> &[TrackletRecord] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn encode_native_frame(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * NATIVE_RECORD);
    for p in cloud.iter() {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn decode_f32_records(bytes: &[u8], record: usize, path: &Path) -> Result<PointCloud, DataError> {
    if bytes.len() % record != 0 {
        return Err(DataError::CorruptFrame { path: path.to_path_buf(), len: bytes.len() as u64, record });
    }
    Ok(bytes
        .chunks_exact(record)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]) as f64;
            Vec3::new(f(0), f(1), f(2))
        })
        .collect())
}

pub fn write_native_frame(path: &Path, cloud: &PointCloud) -> Result<(), DataError> {
    fs::write(path, encode_native_frame(cloud)).map_err(io_err(path))
}

pub fn read_native_frame(path: &Path) -> Result<PointCloud, DataError> {
    let bytes = read_existing(path)?;
    decode_f32_records(&bytes, NATIVE_RECORD, path)
}

/// KITTI velodyne `.bin`: four f32 per point, the fourth (reflectance) dropped.
pub fn read_frame_bin(path: &Path) -> Result<PointCloud, DataError> {
    let bytes = read_existing(path)?;
    decode_f32_records(&bytes, KITTI_RECORD, path)
}

fn read_existing(path: &Path) -> Result<Vec<u8>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(io_err(path))
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let bytes = read_existing(path)?;
    serde_json::from_slice(&bytes).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
}

/// Writes tracklet frames under a dataset root, then the manifest.
pub struct DatasetWriter {
    root: PathBuf,
}

impl DatasetWriter {
    pub fn create(root: &Path) -> Result<Self, DataError> {
        let frames = root.join(FRAMES_DIR);
        fs::create_dir_all(&frames).map_err(io_err(&frames))?;
        Ok(Self { root: root.to_path_buf() })
    }

    /// Writes one file per frame; points are stored as f32.
    pub fn write_tracklet(&self, id: &str, trk: &Tracklet, observed: bool) -> Result<TrackletRecord, DataError> {
        let frames = trk
            .frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let file = format!("{FRAMES_DIR}/{id}_{t:04}.bin");
                write_native_frame(&self.root.join(&file), &f.cloud)?;
                Ok(FrameRecord { file, points: f.cloud.len(), gt: f.gt, sensor: f.sensor, fg_points: f.fg_points })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(TrackletRecord { id: id.to_string(), category: trk.category.clone(), observed, frames })
    }

    pub fn finish(&self, manifest: &DatasetManifest) -> Result<(), DataError> {
        write_json_pretty(&self.root.join(MANIFEST_FILE), manifest)
    }
}

/// A loaded dataset: immutable manifest plus lazy frame access.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    /// Loads the manifest and checks that every referenced frame exists with
    /// the recorded point count.
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let path = root.join(MANIFEST_FILE);
        let manifest: DatasetManifest = read_json(&path)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(DataError::VersionMismatch { path, found: manifest.schema_version, expected: SCHEMA_VERSION });
        }
        for rec in manifest.splits.values().flatten() {
            for f in &rec.frames {
                let fp = root.join(&f.file);
                let meta = fs::metadata(&fp).map_err(|_| DataError::MissingFile(fp.clone()))?;
                if meta.len() != (f.points * NATIVE_RECORD) as u64 {
                    return Err(DataError::CorruptFrame { path: fp, len: meta.len(), record: NATIVE_RECORD });
                }
            }
        }
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn records(&self, split: Split) -> &[TrackletRecord] {
        self.manifest.tracklets(split)
    }

    pub fn load_tracklet(&self, split: Split, index: usize) -> Result<Tracklet, DataError> {
        let rec = self.records(split).get(index).ok_or(DataError::NoSuchTracklet { split, index })?;
        self.load_record(rec)
    }

    pub fn load_record(&self, rec: &TrackletRecord) -> Result<Tracklet, DataError> {
        let frames = rec
            .frames
            .iter()
            .map(|f| {
                let path = self.root.join(&f.file);
                let cloud = read_native_frame(&path)?;
                if cloud.len() != f.points {
                    return Err(DataError::CorruptFrame { path, len: (cloud.len() * NATIVE_RECORD) as u64, record: NATIVE_RECORD });
                }
                Ok(Frame { cloud, gt: f.gt, sensor: f.sensor, fg_points: f.fg_points })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Tracklet { category: rec.category.clone(), frames })
    }
}

/// One object line of a KITTI tracking label file.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiObject {
    pub frame: u32,
    pub track_id: i64,
    pub category: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox_2d: [f64; 4],
    /// Camera convention: x right, y down, z forward; `center` is the volumetric
    /// center and `yaw` is rotation_y about the camera y axis. `None` only for
    /// `DontCare` rows, whose dimensions are placeholders.
    pub box_camera: Option<Box3D>,
}

impl KittiObject {
    /// Maps the camera-frame box into the z-up convention used everywhere else
    /// (x forward, y left, z up), without sensor calibration.
    pub fn box_z_up(&self) -> Option<Box3D> {
        self.box_camera.map(|b| Box3D {
            center: Vec3::new(b.center.z, -b.center.x, -b.center.y),
            size: b.size,
            yaw: wrap_angle(-b.yaw - std::f64::consts::FRAC_PI_2),
        })
    }
}

/// `frame track type truncated occluded alpha bbox_l bbox_t bbox_r bbox_b h w l x y z rotation_y`
pub fn parse_kitti_tracking_label(line: &str) -> Result<KittiObject, DataError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 17 {
        return Err(DataError::MalformedLine { field: fields.len(), reason: format!("expected 17 fields, found {}", fields.len()) });
    }
    let num = |i: usize| -> Result<f64, DataError> {
        fields[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| DataError::MalformedLine { field: i, reason: format!("`{}` is not a finite number", fields[i]) })
    };
    let int = |i: usize| -> Result<i64, DataError> {
        fields[i].parse::<i64>().map_err(|_| DataError::MalformedLine { field: i, reason: format!("`{}` is not an integer", fields[i]) })
    };
    let frame = u32::try_from(int(0)?).map_err(|_| DataError::MalformedLine { field: 0, reason: "negative frame".into() })?;
    let (h, w, l) = (num(10)?, num(11)?, num(12)?);
    let (x, y, z) = (num(13)?, num(14)?, num(15)?);
    let category = fields[2];
    let box_camera = match Box3D::new(Vec3::new(x, y - h / 2.0, z), [l, w, h], num(16)?) {
        Ok(b) => Some(b),
        Err(_) if category == "DontCare" => None,
        Err(e) => return Err(DataError::MalformedLine { field: 10, reason: e.to_string() }),
    };
    Ok(KittiObject {
        frame,
        track_id: int(1)?,
        category: category.to_string(),
        truncated: num(3)?,
        occluded: int(4)? as i32,
        alpha: num(5)?,
        bbox_2d: [num(6)?, num(7)?, num(8)?, num(9)?],
        box_camera,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    Observed,
    Unseen,
    All,
}

impl Observation {
    pub fn as_str(self) -> &'static str {
        match self {
            Observation::Observed => "observed",
            Observation::Unseen => "unseen",
            Observation::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMetricRow")]
pub struct MetricRow {
    split: String,
    category: String,
    observed_flag: Observation,
    frames: usize,
    success_pct: f64,
    precision_pct: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetricRow {
    split: String,
    category: String,
    observed_flag: Observation,
    frames: usize,
    success_pct: f64,
    precision_pct: f64,
}

impl TryFrom<RawMetricRow> for MetricRow {
    type Error = DataError;
    fn try_from(r: RawMetricRow) -> Result<Self, DataError> {
        MetricRow::new(r.split, r.category, r.observed_flag, r.frames, r.success_pct, r.precision_pct)
    }
}

impl MetricRow {
    pub fn new(
        split: impl Into<String>,
        category: impl Into<String>,
        observed_flag: Observation,
        frames: usize,
        success_pct: f64,
        precision_pct: f64,
    ) -> Result<Self, DataError> {
        for (name, v) in [("success", success_pct), ("precision", precision_pct)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(DataError::InvalidReport(format!("{name} {v} outside [0, 100]")));
            }
        }
        Ok(Self { split: split.into(), category: category.into(), observed_flag, frames, success_pct, precision_pct })
    }

    pub fn split(&self) -> &str {
        &self.split
    }
    pub fn category(&self) -> &str {
        &self.category
    }
    pub fn observed_flag(&self) -> Observation {
        self.observed_flag
    }
    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn success(&self) -> f64 {
        self.success_pct
    }
    pub fn precision(&self) -> f64 {
        self.precision_pct
    }
}

/// Metrics of one evaluated tracklet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackletMetrics {
    pub id: String,
    pub category: String,
    pub observed: bool,
    pub frames: usize,
    pub success: f64,
    pub precision: f64,
}

/// Aggregate name used in the `category` column of aggregate rows.
pub const AGGREGATE_CATEGORY: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub config_fingerprint: String,
    /// One row per category, in first-seen order.
    pub categories: Vec<MetricRow>,
    /// Observed, unseen and overall rows (only those with frames).
    pub aggregates: Vec<MetricRow>,
}

fn weighted(items: &[&TrackletMetrics]) -> (usize, f64, f64) {
    let frames: usize = items.iter().map(|m| m.frames).sum();
    if frames == 0 {
        return (0, 0.0, 0.0);
    }
    let s = items.iter().map(|m| m.success * m.frames as f64).sum::<f64>() / frames as f64;
    let p = items.iter().map(|m| m.precision * m.frames as f64).sum::<f64>() / frames as f64;
    (frames, s.clamp(0.0, 100.0), p.clamp(0.0, 100.0))
}

impl MetricsReport {
    /// Frame-weighted aggregation of per-tracklet metrics, per category and
    /// per observed/unseen flag.
    pub fn from_tracklets(split: &str, config_fingerprint: &str, tracklets: &[TrackletMetrics]) -> Result<Self, DataError> {
        let mut order: Vec<(&str, bool)> = Vec::new();
        for m in tracklets {
            if !order.iter().any(|(c, _)| *c == m.category) {
                order.push((&m.category, m.observed));
            }
        }
        let mut categories = Vec::new();
        for (cat, observed) in order {
            let items: Vec<&TrackletMetrics> = tracklets.iter().filter(|m| m.category == cat).collect();
            let (frames, s, p) = weighted(&items);
            let flag = if observed { Observation::Observed } else { Observation::Unseen };
            categories.push(MetricRow::new(split, cat, flag, frames, s, p)?);
        }
        let mut aggregates = Vec::new();
        for flag in [Observation::Observed, Observation::Unseen, Observation::All] {
            let items: Vec<&TrackletMetrics> = tracklets
                .iter()
                .filter(|m| match flag {
                    Observation::Observed => m.observed,
                    Observation::Unseen => !m.observed,
                    Observation::All => true,
                })
                .collect();
            if items.is_empty() {
                continue;
            }
            let (frames, s, p) = weighted(&items);
            aggregates.push(MetricRow::new(split, AGGREGATE_CATEGORY, flag, frames, s, p)?);
        }
        Ok(Self { config_fingerprint: config_fingerprint.to_string(), categories, aggregates })
    }

    pub fn aggregate(&self, flag: Observation) -> Option<&MetricRow> {
        self.aggregates.iter().find(|r| r.observed_flag == flag)
    }

    pub fn category(&self, name: &str) -> Option<&MetricRow> {
        self.categories.iter().find(|r| r.category == name)
    }

    pub fn rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.categories.iter().chain(&self.aggregates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// `.json` → JSON, anything else → CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("split,category,observed_flag,frames,success_pct,precision_pct\n");
    for r in report.rows() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.split),
            csv_field(&r.category),
            r.observed_flag.as_str(),
            r.frames,
            r.success_pct,
            r.precision_pct
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<(), DataError> {
    match format {
        ReportFormat::Json => write_json_pretty(path, report),
        ReportFormat::Csv => {
            let mut f = fs::File::create(path).map_err(io_err(path))?;
            f.write_all(report_csv(report).as_bytes()).map_err(io_err(path))
        }
    }
}

pub fn read_report_json(path: &Path) -> Result<MetricsReport, DataError> {
    read_json(path)
}
