//! One-pass evaluation: track every test tracklet forward from its
//! first-frame box, then score Success/Precision per category.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DataError, Dataset, MetricsReport, Split, TrackletMetrics};
use crate::diffnet::{NetError, Network, Tape};
use crate::geom::{center_distance, iou3d, Box3D, PointCloud};
use crate::rng::{self, tag};
use crate::synth::{crop_local, resample, Tracklet};

/// Points of one grid: thresholds `0, step, …, 100·step`.
pub const GRID_POINTS: usize = 101;
pub const IOU_STEP: f64 = 0.01;
pub const DISTANCE_STEP: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no frame results to score")]
    EmptyInput,
    #[error("tracklet `{id}` has {frames} frame(s); at least 2 are needed")]
    TooShort { id: String, frames: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Margin around the previous box when cropping the search region.
    pub search_offset: f64,
    /// Below this many search points the previous box is carried forward.
    pub min_search_points: usize,
    pub n_template: usize,
    pub n_search: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { search_offset: 2.0, min_search_points: 8, n_template: 128, n_search: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub predicted: Box3D,
    pub iou: f64,
    pub center_distance: f64,
    /// The search crop was too sparse and the previous box was reused.
    pub fallback: bool,
}

/// Everything a tracker sees for one frame. `gt` is only for test stubs.
pub struct FrameInput<'a> {
    pub frame: usize,
    /// Template points, each part in the frame of the box it was cut from.
    pub template: &'a PointCloud,
    /// Search points in the frame of `reference`.
    pub search: &'a PointCloud,
    /// Previous predicted box, world frame.
    pub reference: &'a Box3D,
    /// First-frame box size.
    pub template_size: [f64; 3],
    pub gt: &'a Box3D,
}

pub trait Predictor: Sync {
    /// Predicted box in the world frame.
    fn predict(&self, input: &FrameInput<'_>) -> Result<Box3D, EvalError>;
}

/// Runs the network and keeps its highest-scoring proposal.
pub struct NetworkPredictor<'a>(pub &'a Network);

impl Predictor for NetworkPredictor<'_> {
    fn predict(&self, input: &FrameInput<'_>) -> Result<Box3D, EvalError> {
        let mut tape = Tape::new();
        let pass = self.0.forward(&mut tape, input.template, input.search, input.template_size)?;
        Ok(pass.proposals.best_box(&tape).from_frame_of(input.reference))
    }
}

/// Always returns the ground truth.
pub struct OracleStub;

impl Predictor for OracleStub {
    fn predict(&self, input: &FrameInput<'_>) -> Result<Box3D, EvalError> {
        Ok(*input.gt)
    }
}

/// Always returns the previous prediction.
pub struct PreviousBoxStub;

impl Predictor for PreviousBoxStub {
    fn predict(&self, input: &FrameInput<'_>) -> Result<Box3D, EvalError> {
        Ok(*input.reference)
    }
}

/// Tracks frames `1..T`, starting from the frame-0 ground truth.
pub fn track_tracklet(
    predictor: &dyn Predictor,
    trk: &Tracklet,
    config: &EvalConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<FrameResult>, EvalError> {
    let first = &trk.frames[0];
    let first_points = crop_local(&first.cloud, &first.gt, 0.0);
    let mut prev = first.gt;
    let mut results = Vec::with_capacity(trk.len().saturating_sub(1));
    for (t, frame) in trk.frames.iter().enumerate().skip(1) {
        let search_local = crop_local(&frame.cloud, &prev, config.search_offset);
        let mut template_pts = first_points.points.clone();
        template_pts.extend(crop_local(&trk.frames[t - 1].cloud, &prev, 0.0).points);
        let fallback = search_local.len() < config.min_search_points || template_pts.is_empty();
        let predicted = if fallback {
            prev
        } else {
            let search = resample(&search_local, config.n_search, rng);
            let template = resample(&PointCloud::new(template_pts), config.n_template, rng);
            let input = FrameInput {
                frame: t,
                template: &template,
                search: &search,
                reference: &prev,
                template_size: first.gt.size,
                gt: &frame.gt,
            };
            predictor.predict(&input)?
        };
        results.push(FrameResult {
            frame: t,
            predicted,
            iou: iou3d(&predicted, &frame.gt).clamp(0.0, 1.0),
            center_distance: center_distance(&predicted, &frame.gt),
            fallback,
        });
        prev = predicted;
    }
    Ok(results)
}

/// Fraction of values passing each threshold `k·step`, `k = 0..=100`.
fn curve(values: &[f64], step: f64, pass: impl Fn(f64, f64) -> bool) -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|k| {
            let th = k as f64 * step;
            values.iter().filter(|&&v| pass(v, th)).count() as f64 / values.len() as f64
        })
        .collect()
}

/// Share of frames with IoU strictly above each threshold.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    curve(ious, IOU_STEP, |v, th| v > th)
}

/// Share of frames with center distance strictly below each threshold.
pub fn precision_curve(distances: &[f64]) -> Vec<f64> {
    curve(distances, DISTANCE_STEP, |v, th| v < th)
}

fn auc(curve: &[f64]) -> f64 {
    100.0 * curve.iter().sum::<f64>() / curve.len() as f64
}

pub fn success_auc(ious: &[f64]) -> Result<f64, EvalError> {
    if ious.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(auc(&success_curve(ious)))
}

pub fn precision_auc(distances: &[f64]) -> Result<f64, EvalError> {
    if distances.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(auc(&precision_curve(distances)))
}

#[derive(Debug, Clone)]
pub struct TrackletResult {
    pub id: String,
    pub category: String,
    pub observed: bool,
    pub frames: Vec<FrameResult>,
}

impl TrackletResult {
    pub fn metrics(&self) -> Result<TrackletMetrics, EvalError> {
        let ious: Vec<f64> = self.frames.iter().map(|f| f.iou).collect();
        let cds: Vec<f64> = self.frames.iter().map(|f| f.center_distance).collect();
        Ok(TrackletMetrics {
            id: self.id.clone(),
            category: self.category.clone(),
            observed: self.observed,
            frames: self.frames.len(),
            success: success_auc(&ious)?,
            precision: precision_auc(&cds)?,
        })
    }
}

/// Tracks every tracklet of `split` (in parallel, results in manifest order)
/// and aggregates the metrics. Tracklet `k` resamples from the stream
/// `(seed, EVAL, k)`.
pub fn evaluate_split(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    split: Split,
    config: &EvalConfig,
    seed: u64,
    config_fingerprint: &str,
) -> Result<(MetricsReport, Vec<TrackletResult>), EvalError> {
    let results = dataset
        .records(split)
        .par_iter()
        .enumerate()
        .map(|(k, rec)| {
            let trk = dataset.load_record(rec)?;
            if trk.len() < 2 {
                return Err(EvalError::TooShort { id: rec.id.clone(), frames: trk.len() });
            }
            let mut r = rng::stream(seed, &[tag::EVAL, k as u64]);
            let frames = track_tracklet(predictor, &trk, config, &mut r)?;
            Ok(TrackletResult { id: rec.id.clone(), category: rec.category.clone(), observed: rec.observed, frames })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let metrics = results.iter().map(TrackletResult::metrics).collect::<Result<Vec<_>, _>>()?;
    let report = MetricsReport::from_tracklets(split.as_str(), config_fingerprint, &metrics)?;
    Ok((report, results))
}

/// Success and precision curves, pooled over all frames of each
/// observed/unseen group, as CSV (`group,kind,threshold,value`).
pub fn curves_csv(results: &[TrackletResult]) -> String {
    let mut out = String::from("group,kind,threshold,value\n");
    for (group, pick) in [("observed", Some(true)), ("unseen", Some(false)), ("all", None)] {
        let frames: Vec<&FrameResult> =
            results.iter().filter(|r| pick.map_or(true, |o| r.observed == o)).flat_map(|r| &r.frames).collect();
        if frames.is_empty() {
            continue;
        }
        let ious: Vec<f64> = frames.iter().map(|f| f.iou).collect();
        let cds: Vec<f64> = frames.iter().map(|f| f.center_distance).collect();
        for (kind, step, values) in [("success", IOU_STEP, success_curve(&ious)), ("precision", DISTANCE_STEP, precision_curve(&cds))] {
            for (k, v) in values.iter().enumerate() {
                out.push_str(&format!("{group},{kind},{},{v}\n", k as f64 * step));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_frames_score_below_100() {
        let s = success_auc(&[1.0; 5]).unwrap();
        let p = precision_auc(&[0.0; 5]).unwrap();
        assert!((s - 10000.0 / 101.0).abs() < 1e-9);
        assert!((p - 10000.0 / 101.0).abs() < 1e-9);
    }

    #[test]
    fn hopeless_frames_score_zero() {
        assert_eq!(success_auc(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(precision_auc(&[10.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_half_iou() {
        assert!((success_auc(&[0.5]).unwrap() - 5000.0 / 101.0).abs() < 1e-9);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(success_auc(&[]), Err(EvalError::EmptyInput)));
        assert!(matches!(precision_auc(&[]), Err(EvalError::EmptyInput)));
    }
}
