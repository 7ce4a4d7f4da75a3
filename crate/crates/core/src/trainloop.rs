//! Offline training: per mini-batch, sample weights are solved on the pooled
//! fused features of the current parameters, then the network takes one
//! step on the weighted loss. Uniform mode skips the weight solve.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{io_err, DataError, Dataset, Split};
use crate::decorr::{aggregate, optimize_weights, weight_entropy, DecorrConfig, DecorrError, RffBasis};
use crate::diffnet::{
    collect_param_grads, forward_with_loss, load_checkpoint, optimizer_step, save_checkpoint, AdamConfig, AdamState,
    LossBreakdown, LossConfig, NetConfig, NetError, Network, ParamGrads, Tape, ValueGrid,
};
use crate::rng::{self, tag};
use crate::synth::{make_training_pair, PairConfig, SynthError, Tracklet};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "train_timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Decorr(#[from] DecorrError),
    #[error("pair generation failed: {0}")]
    Synth(#[from] SynthError),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u64, batch: usize },
    #[error("{0}")]
    Isolation(String),
    #[error("cannot resume: {0}")]
    Resume(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every sample weighs `1/B`.
    #[default]
    Uniform,
    /// Weights solved per batch to decorrelate pooled fused features.
    Decorrelated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    /// Write `epoch_NNN.ckpt` every this many epochs (0: final only).
    pub checkpoint_every: u64,
    pub sigma_center: f64,
    pub sigma_yaw: f64,
    pub search_offset: f64,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub decorr: DecorrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let pair = PairConfig::default();
        Self {
            mode: TrainMode::Uniform,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            checkpoint_every: 0,
            sigma_center: pair.sigma_center,
            sigma_yaw: pair.sigma_yaw,
            search_offset: pair.offset,
            net: NetConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            decorr: DecorrConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(TrainError::Config("adam.lr must be positive".into()));
        }
        if !(self.sigma_center >= 0.0 && self.sigma_yaw >= 0.0 && self.search_offset >= 0.0) {
            return Err(TrainError::Config("perturbation and offset must be nonnegative".into()));
        }
        self.net.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.decorr.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig {
            sigma_center: self.sigma_center,
            sigma_yaw: self.sigma_yaw,
            offset: self.search_offset,
            n_template: self.net.n_template,
            n_search: self.net.n_search,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: u64,
    pub batch: usize,
    pub samples: usize,
    /// Weighted per-term losses.
    pub vote: f64,
    pub cls: f64,
    pub bbox: f64,
    pub score: f64,
    /// `Σ ω_m L_m`.
    pub weighted_loss: f64,
    /// Unweighted mean of the per-sample totals.
    pub mean_loss: f64,
    pub decorr_initial: Option<f64>,
    pub decorr_final: Option<f64>,
    /// Solver iterate returned (0: the uniform start).
    pub decorr_best_iteration: Option<usize>,
    pub weight_entropy: f64,
}

/// Wall-clock timings are kept apart from the log so the log stays
/// reproducible bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchTiming {
    pub epoch: u64,
    pub batch: usize,
    pub wall_ms: f64,
}

pub fn read_train_log(path: &Path) -> Result<Vec<BatchRecord>, DataError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(io_err(path))?;
            serde_json::from_str(&l).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub records: Vec<BatchRecord>,
    pub final_checkpoint: PathBuf,
}

/// Where the run writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

pub fn epoch_checkpoint(out: &Path, epoch: u64) -> PathBuf {
    out.join(format!("epoch_{epoch:03}.ckpt"))
}

struct Sample {
    tracklet: usize,
    frame: usize,
}

struct SampleResult {
    losses: LossBreakdown,
    pooled: Vec<f64>,
    tape: Tape,
    total: crate::diffnet::Var,
}

fn run_sample(net: &Network, trk: &Tracklet, s: &Sample, pair_cfg: &PairConfig, cfg: &TrainConfig, epoch: u64, idx: usize) -> Result<Option<SampleResult>, TrainError> {
    let mut r = rng::stream(cfg.seed, &[tag::PAIR, epoch, idx as u64]);
    let pair = match make_training_pair(trk, s.frame, pair_cfg, &mut r) {
        Ok(p) => p,
        Err(SynthError::SearchEmpty | SynthError::TemplateEmpty) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut tape = Tape::new();
    let (pass, vars) = forward_with_loss(net, &mut tape, &pair.template, &pair.search, &pair.gt_box_local, &cfg.loss)?;
    let losses = LossBreakdown::read(&tape, &vars);
    let pooled = aggregate(tape.value(pass.fused))?;
    Ok(Some(SampleResult { losses, pooled, tape, total: vars.total }))
}

fn weights_bits(w: &[f64]) -> Vec<u64> {
    w.iter().map(|v| v.to_bits()).collect()
}

/// Solves the batch weights. Returns `(weights, initial, final, best_iteration)`.
fn solve_weights(
    pooled: &[Vec<f64>],
    cfg: &TrainConfig,
    epoch: u64,
    batch: usize,
) -> Result<(Vec<f64>, Option<f64>, Option<f64>, Option<usize>), TrainError> {
    let b = pooled.len();
    let uniform = vec![1.0 / b as f64; b];
    let d = pooled[0].len();
    if cfg.mode == TrainMode::Uniform {
        return Ok((uniform, None, None, None));
    }
    if d < 2 {
        // no channel pairs: the objective is identically zero
        return Ok((uniform, Some(0.0), Some(0.0), Some(0)));
    }
    let grid = ValueGrid::from_vec(b, d, pooled.iter().flatten().copied().collect());
    let mut r = rng::stream(cfg.seed, &[tag::RFF_BASIS, epoch, batch as u64]);
    let basis = RffBasis::sample(d, cfg.decorr.n_u, cfg.decorr.n_v, &mut r);
    let sol = optimize_weights(&grid, &basis, &cfg.decorr)?;
    Ok((sol.weights, Some(sol.initial_objective), Some(sol.final_objective), Some(sol.best_iteration)))
}

/// Runs (or resumes) training, writing the log, cadence checkpoints and the
/// final checkpoint under `paths.out`.
pub fn train(cfg: &TrainConfig, paths: &TrainPaths) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let dataset = Dataset::open(&paths.data)?;
    let tracklets: Vec<Tracklet> =
        dataset.records(Split::Train).iter().map(|r| dataset.load_record(r)).collect::<Result<_, _>>()?;
    let samples: Vec<Sample> = tracklets
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (1..t.len()).map(move |f| Sample { tracklet: i, frame: f }))
        .collect();
    if samples.len() < 2 {
        return Err(TrainError::Config("training split has fewer than 2 usable frames".into()));
    }
    fs::create_dir_all(&paths.out).map_err(|e| DataError::Io { path: paths.out.clone(), source: e })?;
    let log_path = paths.out.join(LOG_FILE);
    let timing_path = paths.out.join(TIMING_FILE);
    let extra = serde_json::to_value(cfg).expect("config serializes");

    let (mut net, mut adam, start_epoch, mut records) = match &paths.resume {
        None => {
            let net = Network::new(cfg.net.clone(), cfg.seed)?;
            let adam = AdamState::new(net.params());
            (net, adam, 0, Vec::new())
        }
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            let saved: TrainConfig = serde_json::from_value(ckpt.header.extra.clone())
                .map_err(|e| TrainError::Resume(format!("checkpoint carries no training config: {e}")))?;
            let comparable = |c: &TrainConfig| TrainConfig { epochs: 0, checkpoint_every: 0, ..c.clone() };
            if comparable(&saved) != comparable(cfg) {
                return Err(TrainError::Resume("training config differs from the checkpoint's".into()));
            }
            let (net, adam, header) = ckpt.into_network()?;
            let kept: Vec<BatchRecord> = if log_path.exists() {
                read_train_log(&log_path)?.into_iter().filter(|r| r.epoch < header.epoch).collect()
            } else {
                Vec::new()
            };
            (net, adam, header.epoch, kept)
        }
    };

    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    for r in &records {
        writeln!(log, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err(&log_path))?;
    }
    let mut timing = if start_epoch == 0 {
        fs::File::create(&timing_path)
    } else {
        fs::OpenOptions::new().create(true).append(true).open(&timing_path)
    }
    .map_err(io_err(&timing_path))?;

    let pair_cfg = cfg.pair_config();
    let b = cfg.batch_size;
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::EPOCH_ORDER, epoch]));
        let mut batch_losses = Vec::new();
        for (batch, chunk) in order.chunks(b).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let started = Instant::now();
            let results: Vec<Option<SampleResult>> = chunk
                .par_iter()
                .map(|&idx| {
                    let s = &samples[idx];
                    run_sample(&net, &tracklets[s.tracklet], s, &pair_cfg, cfg, epoch, idx)
                })
                .collect::<Result<_, _>>()?;
            let results: Vec<SampleResult> = results.into_iter().flatten().collect();
            if results.len() < 2 {
                continue;
            }
            if results.iter().any(|r| !r.losses.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }

            let fp_before = net.params().fingerprint();
            let pooled: Vec<Vec<f64>> = results.iter().map(|r| r.pooled.clone()).collect();
            let (weights, d_init, d_final, d_best) = solve_weights(&pooled, cfg, epoch, batch)?;
            if net.params().fingerprint() != fp_before {
                return Err(TrainError::Isolation("weight solving changed network parameters".into()));
            }
            let w_bits = weights_bits(&weights);

            let grads: Vec<ParamGrads> = results
                .par_iter()
                .zip(&weights)
                .map(|(r, &w)| {
                    let g = r.tape.backward(r.total, w)?;
                    let mut acc = net.params().zero_grads();
                    collect_param_grads(&r.tape, &g, &mut acc);
                    Ok(acc)
                })
                .collect::<Result<_, NetError>>()?;
            let mut total = net.params().zero_grads();
            for g in &grads {
                for (t, s) in total.iter_mut().zip(g) {
                    for (a, v) in t.data_mut().iter_mut().zip(s.data()) {
                        *a += v;
                    }
                }
            }
            if total.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            optimizer_step(net.params_mut(), &total, &mut adam, &cfg.adam)?;
            if weights_bits(&weights) != w_bits {
                return Err(TrainError::Isolation("network step changed sample weights".into()));
            }

            let weighted = |f: fn(&LossBreakdown) -> f64| results.iter().zip(&weights).map(|(r, w)| w * f(&r.losses)).sum::<f64>();
            let rec = BatchRecord {
                epoch,
                batch,
                samples: results.len(),
                vote: weighted(|l| l.vote),
                cls: weighted(|l| l.cls),
                bbox: weighted(|l| l.bbox),
                score: weighted(|l| l.score),
                weighted_loss: weighted(|l| l.total),
                mean_loss: results.iter().map(|r| r.losses.total).sum::<f64>() / results.len() as f64,
                decorr_initial: d_init,
                decorr_final: d_final,
                decorr_best_iteration: d_best,
                weight_entropy: weight_entropy(&weights),
            };
            if !rec.weighted_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            writeln!(log, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io_err(&log_path))?;
            let t = BatchTiming { epoch, batch, wall_ms: started.elapsed().as_secs_f64() * 1e3 };
            writeln!(timing, "{}", serde_json::to_string(&t).expect("timing serializes")).map_err(io_err(&timing_path))?;
            batch_losses.push(rec.weighted_loss);
            records.push(rec);
        }
        let done = epoch + 1;
        let mean = batch_losses.iter().sum::<f64>() / batch_losses.len().max(1) as f64;
        log::info!("epoch {done}/{}: {} batches, mean weighted loss {mean:.4}", cfg.epochs, batch_losses.len());
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(&epoch_checkpoint(&paths.out, done), &net, &adam, done, extra.clone())?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let final_checkpoint = paths.out.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &net, &adam, cfg.epochs, extra)?;
    Ok(TrainOutcome { network: net, records, final_checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn uniform_weights_give_mean_loss() {
        let pooled = vec![vec![0.1, 0.2]; 4];
        let (w, ..) = solve_weights(&pooled, &TrainConfig::default(), 0, 0).unwrap();
        let losses = [0.3, 1.7, 2.2, 0.05];
        let weighted: f64 = losses.iter().zip(&w).map(|(l, w)| l * w).sum();
        let mean = losses.iter().sum::<f64>() / 4.0;
        assert!((weighted - mean).abs() < 1e-12);
    }

    #[test]
    fn single_channel_reduces_to_uniform() {
        let cfg = TrainConfig { mode: TrainMode::Decorrelated, ..TrainConfig::default() };
        let pooled = vec![vec![0.1], vec![0.5], vec![-0.3]];
        let (w, init, fin, _) = solve_weights(&pooled, &cfg, 0, 0).unwrap();
        assert_eq!(w, vec![1.0 / 3.0; 3]);
        assert_eq!((init, fin), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..TrainConfig::default() };
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), TrainConfig::default().fingerprint());
    }
}
