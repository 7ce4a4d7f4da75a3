//! Sample reweighting that removes inter-channel dependence of pooled fused
//! features. Each channel passes through random Fourier features; the
//! weighted cross-covariance of every channel pair is penalized in squared
//! Frobenius norm, and the weights live on the probability simplex.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Tape, ValueGrid, Var};

#[derive(Debug, thiserror::Error)]
pub enum DecorrError {
    #[error("cannot pool an empty feature grid")]
    EmptyFeature,
    #[error("weight solving needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("need at least 2 channels, got {0}")]
    TooFewChannels(usize),
    #[error("weights sum to {sum}, not 1")]
    WeightNotNormalized { sum: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite decorrelation objective at iteration {iteration} (lr {lr}, weights {weights:?})")]
    NonFiniteObjective { iteration: usize, lr: f64, weights: Vec<f64> },
}

/// How the weighted cross-covariance is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    /// `1/(B−1) Σ_m (ω_m U_m − Σ_k ω_k U_k)ᵀ (ω_m V_m − Σ_k ω_k V_k)`.
    #[default]
    PaperExact,
    /// `1/(B−1) Σ_m ω_m (U_m − Ū_w)ᵀ (V_m − V̄_w)` with weighted means.
    Standard,
}

/// How weights are kept on the simplex while descending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Simplex {
    /// Weights are the softmax of free logits.
    #[default]
    Softmax,
    /// Plain gradient steps on the weights followed by Euclidean projection.
    Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecorrConfig {
    pub n_u: usize,
    pub n_v: usize,
    pub mode: CovMode,
    pub simplex: Simplex,
    pub iterations: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate every `decay_every` iterations.
    pub decay: f64,
    pub decay_every: usize,
    /// Z-score every channel (unweighted, per batch) before the feature map.
    pub standardize: bool,
}

impl Default for DecorrConfig {
    fn default() -> Self {
        Self {
            n_u: 5,
            n_v: 5,
            mode: CovMode::PaperExact,
            simplex: Simplex::Softmax,
            iterations: 20,
            lr: 1.0,
            decay: 0.1,
            decay_every: 10,
            standardize: true,
        }
    }
}

impl DecorrConfig {
    /// Learning rate of the 0-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let k = if self.decay_every == 0 { 0 } else { it / self.decay_every };
        self.lr * self.decay.powi(k as i32)
    }

    pub fn validate(&self) -> Result<(), DecorrError> {
        if self.n_u == 0 || self.n_v == 0 {
            return Err(DecorrError::DimensionMismatch("basis counts must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.decay.is_finite() && self.decay > 0.0) {
            return Err(DecorrError::DimensionMismatch("learning rate and decay must be positive".into()));
        }
        Ok(())
    }
}

/// Channel-wise mean over the rows of a fused feature grid.
pub fn aggregate(z: &ValueGrid) -> Result<Vec<f64>, DecorrError> {
    if z.rows() == 0 || z.cols() == 0 {
        return Err(DecorrError::EmptyFeature);
    }
    Ok(z.column_mean())
}

/// One random Fourier feature `√2 cos(a x + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rff {
    pub a: f64,
    pub b: f64,
}

/// Per-channel feature maps for the `u` and `v` sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffBasis {
    pub u: Vec<Vec<Rff>>,
    pub v: Vec<Vec<Rff>>,
}

fn draw(n: usize, rng: &mut ChaCha8Rng) -> Vec<Rff> {
    (0..n).map(|_| Rff { a: rng.sample(StandardNormal), b: rng.gen::<f64>() * 2.0 * PI }).collect()
}

impl RffBasis {
    /// `a ~ N(0, 1)`, `b ~ U[0, 2π)`, independently per channel and side.
    pub fn sample(channels: usize, n_u: usize, n_v: usize, rng: &mut ChaCha8Rng) -> Self {
        let u = (0..channels).map(|_| draw(n_u, rng)).collect();
        let v = (0..channels).map(|_| draw(n_v, rng)).collect();
        Self { u, v }
    }

    pub fn channels(&self) -> usize {
        self.u.len()
    }
}

/// `B × N` matrix with entry `(m, t) = √2 cos(a_t x_m + b_t)`.
pub fn rff_apply(values: &[f64], basis: &[Rff]) -> ValueGrid {
    let data = values.iter().flat_map(|&x| basis.iter().map(move |f| SQRT_2 * (f.a * x + f.b).cos())).collect();
    ValueGrid::from_vec(values.len(), basis.len(), data)
}

fn check_weights(w: &[f64], b: usize) -> Result<(), DecorrError> {
    if w.len() != b {
        return Err(DecorrError::DimensionMismatch(format!("{} weights for {b} samples", w.len())));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(DecorrError::WeightNotNormalized { sum });
    }
    Ok(())
}

/// Centers one side of the estimator on the tape (see [`CovMode`]). The
/// `u` side of `Standard` mode also carries the per-sample weight.
fn centered(tape: &mut Tape, x: Var, w: Var, mode: CovMode, weighted_side: bool) -> Var {
    match mode {
        CovMode::PaperExact => {
            let wx = tape.scale_rows(x, w);
            let b = tape.value(x).rows();
            let ones = tape.constant(ValueGrid::from_vec(1, b, vec![1.0; b]));
            let mean = tape.matmul(ones, wx);
            tape.sub_row(wx, mean)
        }
        CovMode::Standard => {
            let wt = tape.transpose(w);
            let mean = tape.matmul(wt, x);
            let c = tape.sub_row(x, mean);
            if weighted_side {
                tape.scale_rows(c, w)
            } else {
                c
            }
        }
    }
}

/// Weighted cross-covariance `N_u × N_v` of two feature matrices.
pub fn weighted_cross_cov(u: &ValueGrid, v: &ValueGrid, w: &[f64], mode: CovMode) -> Result<ValueGrid, DecorrError> {
    let b = u.rows();
    if v.rows() != b {
        return Err(DecorrError::DimensionMismatch(format!("{} vs {} rows", b, v.rows())));
    }
    if b < 2 {
        return Err(DecorrError::BatchTooSmall(b));
    }
    check_weights(w, b)?;
    let mut tape = Tape::new();
    let (uv, vv) = (tape.constant(u.clone()), tape.constant(v.clone()));
    let wv = tape.constant(ValueGrid::column(w.to_vec()));
    let out = cross_cov_on_tape(&mut tape, uv, vv, wv, mode);
    Ok(tape.value(out).clone())
}

fn cross_cov_on_tape(tape: &mut Tape, u: Var, v: Var, w: Var, mode: CovMode) -> Var {
    let b = tape.value(u).rows();
    let x = centered(tape, u, w, mode, true);
    let y = centered(tape, v, w, mode, false);
    let xt = tape.transpose(x);
    let p = tape.matmul(xt, y);
    tape.scale(p, 1.0 / (b - 1) as f64)
}

/// Z-scores each column (population statistics). Constant columns map to 0.
pub fn standardize(batch: &ValueGrid) -> ValueGrid {
    let (b, d) = (batch.rows(), batch.cols());
    let mean = batch.column_mean();
    let mut out = batch.clone();
    for c in 0..d {
        let var = (0..b).map(|r| (batch.get(r, c) - mean[c]).powi(2)).sum::<f64>() / b as f64;
        let sd = var.sqrt();
        for r in 0..b {
            out.data_mut()[r * d + c] = if sd > 1e-12 { (batch.get(r, c) - mean[c]) / sd } else { 0.0 };
        }
    }
    out
}

/// Feature matrices of every channel, ready for repeated objective
/// evaluations under changing weights.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    u: Vec<ValueGrid>,
    v: Vec<ValueGrid>,
    mode: CovMode,
}

impl PreparedBatch {
    /// `batch` is `B × D` pooled features, one row per sample.
    pub fn new(batch: &ValueGrid, basis: &RffBasis, config: &DecorrConfig) -> Result<Self, DecorrError> {
        let (b, d) = (batch.rows(), batch.cols());
        if b < 2 {
            return Err(DecorrError::BatchTooSmall(b));
        }
        if d < 2 {
            return Err(DecorrError::TooFewChannels(d));
        }
        if basis.channels() != d || basis.v.len() != d {
            return Err(DecorrError::DimensionMismatch(format!("basis for {} channels, batch has {d}", basis.channels())));
        }
        if !batch.is_finite() {
            return Err(DecorrError::NonFiniteObjective { iteration: 0, lr: 0.0, weights: Vec::new() });
        }
        let z = if config.standardize { standardize(batch) } else { batch.clone() };
        let column = |c: usize| (0..b).map(|r| z.get(r, c)).collect::<Vec<_>>();
        let u = (0..d).map(|c| rff_apply(&column(c), &basis.u[c])).collect();
        let v = (0..d).map(|c| rff_apply(&column(c), &basis.v[c])).collect();
        Ok(Self { u, v, mode: config.mode })
    }

    pub fn samples(&self) -> usize {
        self.u[0].rows()
    }

    /// Records `Σ_{i<j} ‖Λ(u_i, v_j)‖_F²` as a function of the `B×1` weight node.
    pub fn record(&self, tape: &mut Tape, w: Var) -> Var {
        let d = self.u.len();
        let b = self.samples();
        let xs: Vec<Var> = self
            .u
            .iter()
            .map(|u| {
                let uv = tape.constant(u.clone());
                let x = centered(tape, uv, w, self.mode, true);
                tape.transpose(x)
            })
            .collect();
        let ys: Vec<Var> = self
            .v
            .iter()
            .map(|v| {
                let vv = tape.constant(v.clone());
                centered(tape, vv, w, self.mode, false)
            })
            .collect();
        let mut terms = Vec::with_capacity(d * (d - 1) / 2);
        for i in 0..d {
            for j in i + 1..d {
                let p = tape.matmul(xs[i], ys[j]);
                terms.push(tape.sum_squares(p));
            }
        }
        let s = tape.add_n(terms);
        tape.scale(s, 1.0 / ((b - 1) * (b - 1)) as f64)
    }

    pub fn objective(&self, w: &[f64]) -> Result<f64, DecorrError> {
        check_weights(w, self.samples())?;
        let mut tape = Tape::new();
        let wv = tape.constant(ValueGrid::column(w.to_vec()));
        let out = self.record(&mut tape, wv);
        Ok(tape.scalar(out))
    }

    /// Objective and its gradient with respect to the weights.
    pub fn objective_and_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>), DecorrError> {
        let mut tape = Tape::new();
        let wv = tape.constant(ValueGrid::column(w.to_vec()));
        let out = self.record(&mut tape, wv);
        let g = tape.backward(out, 1.0).expect("objective node is on the tape");
        let grad = g.get(wv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; w.len()]);
        Ok((tape.scalar(out), grad))
    }

    /// Objective and its gradient with respect to softmax logits.
    pub fn objective_and_logit_grad(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let lv = tape.constant(ValueGrid::column(logits.to_vec()));
        let w = tape.softmax_col(lv);
        let out = self.record(&mut tape, w);
        let g = tape.backward(out, 1.0).expect("objective node is on the tape");
        let grad = g.get(lv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; logits.len()]);
        (tape.scalar(out), grad)
    }
}

/// `Σ_{i<j} ‖Λ‖_F²` of a `B × D` pooled batch under weights `w`.
pub fn decorr_objective(batch: &ValueGrid, w: &[f64], basis: &RffBasis, config: &DecorrConfig) -> Result<f64, DecorrError> {
    PreparedBatch::new(batch, basis, config)?.objective(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    /// Lowest-objective iterate seen (the uniform start included).
    pub weights: Vec<f64>,
    pub initial_objective: f64,
    /// Objective of `weights`; never above `initial_objective`.
    pub final_objective: f64,
    /// Index into `history` of the returned iterate.
    pub best_iteration: usize,
    /// Objective of every iterate: the start, then after each step.
    pub history: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Shannon entropy (nats) of a weight vector.
pub fn weight_entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn non_finite(iteration: usize, lr: f64, weights: &[f64]) -> DecorrError {
    DecorrError::NonFiniteObjective { iteration, lr, weights: weights.to_vec() }
}

// Softmax weights are positive in exact arithmetic but may underflow to 0.
fn check_simplex(w: &[f64], iteration: usize) {
    let sum: f64 = w.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6, "iterate {iteration}: weights sum to {sum}");
    assert!(w.iter().all(|v| *v >= 0.0), "iterate {iteration}: negative weight");
}

/// Gradient descent on the sample weights from the uniform start. Returns
/// the lowest-objective iterate: a full learning rate can overshoot, and the
/// uniform start is always a candidate.
pub fn optimize_weights(batch: &ValueGrid, basis: &RffBasis, config: &DecorrConfig) -> Result<WeightSolution, DecorrError> {
    optimize_weights_observed(batch, basis, config, |_, _, _| {})
}

/// [`optimize_weights`], calling `observe(iteration, weights, objective)` at
/// every iterate.
pub fn optimize_weights_observed(
    batch: &ValueGrid,
    basis: &RffBasis,
    config: &DecorrConfig,
    mut observe: impl FnMut(usize, &[f64], f64),
) -> Result<WeightSolution, DecorrError> {
    config.validate()?;
    let prepared = PreparedBatch::new(batch, basis, config)?;
    let b = prepared.samples();
    let mut history = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut record = |f: f64, w: &[f64], history: &mut Vec<f64>| {
        if best.as_ref().is_none_or(|(bf, _, _)| f < *bf) {
            best = Some((f, history.len(), w.to_vec()));
        }
        history.push(f);
    };
    match config.simplex {
        Simplex::Softmax => {
            let mut logits = vec![0.0; b];
            for it in 0..=config.iterations {
                let w = softmax(&logits);
                check_simplex(&w, it);
                let (f, g) = prepared.objective_and_logit_grad(&logits);
                let lr = config.lr_at(it);
                if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(non_finite(it, lr, &w));
                }
                observe(it, &w, f);
                record(f, &w, &mut history);
                if it < config.iterations {
                    for (l, gi) in logits.iter_mut().zip(&g) {
                        *l -= lr * gi;
                    }
                }
            }
        }
        Simplex::Projection => {
            let mut w = vec![1.0 / b as f64; b];
            for it in 0..=config.iterations {
                check_simplex(&w, it);
                let (f, g) = prepared.objective_and_grad(&w)?;
                let lr = config.lr_at(it);
                if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(non_finite(it, lr, &w));
                }
                observe(it, &w, f);
                record(f, &w, &mut history);
                if it < config.iterations {
                    let step: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - lr * gi).collect();
                    w = project_simplex(&step);
                }
            }
        }
    }
    let (final_objective, best_iteration, weights) = best.expect("at least the start is evaluated");
    Ok(WeightSolution { weights, initial_objective: history[0], final_objective, best_iteration, history })
}

/// The built-in demonstration batch: 32 samples, 8 channels, channel 1
/// tracking channel 0 (noise 0.05) on half the samples.
pub fn demo_batch(seed: u64) -> ValueGrid {
    confounded_batch(32, 8, 0.05, &mut crate::rng::stream(seed, &[crate::rng::tag::DEMO, 0]))
}

/// Independent Gaussian control batch of the demo's shape.
pub fn demo_control_batch(seed: u64) -> ValueGrid {
    independent_batch(32, 8, &mut crate::rng::stream(seed, &[crate::rng::tag::DEMO, 1]))
}

/// Bases used with the demo batches.
pub fn demo_basis(seed: u64, config: &DecorrConfig) -> RffBasis {
    RffBasis::sample(8, config.n_u, config.n_v, &mut crate::rng::stream(seed, &[crate::rng::tag::DEMO, 2]))
}

/// Gaussian `B × D` batch in which, for the first half of the samples,
/// channel 1 copies channel 0 up to `noise`.
pub fn confounded_batch(b: usize, d: usize, noise: f64, rng: &mut ChaCha8Rng) -> ValueGrid {
    assert!(d >= 2);
    let mut g = ValueGrid::from_vec(b, d, (0..b * d).map(|_| rng.sample(StandardNormal)).collect());
    for r in 0..b / 2 {
        let e: f64 = rng.sample(StandardNormal);
        let v = g.get(r, 0) + noise * e;
        g.data_mut()[r * d + 1] = v;
    }
    g
}

/// Independent standard Gaussian `B × D` batch.
pub fn independent_batch(b: usize, d: usize, rng: &mut ChaCha8Rng) -> ValueGrid {
    ValueGrid::from_vec(b, d, (0..b * d).map(|_| rng.sample(StandardNormal)).collect())
}
