//! Training, evaluation and gradient checking for the toy model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::corpus::{TrainExample, VOCAB_SIZE};
use super::model::{context, ToyModel};
use super::rng::ToyRng;
use crate::scalar::Scalar;
use crate::weighting::{self, MeanMode, WeightConfig};

pub const DEFAULT_DIM: usize = 16;
const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Faft,
    Sft,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Faft => "faft",
            Mode::Sft => "sft",
        })
    }
}

/// When per-sample weights are recomputed from the current model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRefresh {
    #[default]
    PerBatch,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dim: usize,
    pub refresh: WeightRefresh,
    pub mean_mode: MeanMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Faft,
            alpha: 2.0,
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            dim: DEFAULT_DIM,
            refresh: WeightRefresh::PerBatch,
            mean_mode: MeanMode::HybridWeighted,
        }
    }
}

impl TrainConfig {
    fn weight_config<T: Scalar>(&self) -> Result<WeightConfig<T>, ToyError> {
        let mut cfg =
            WeightConfig::with_alpha(T::lit(self.alpha)).map_err(|e| ToyError::InvalidConfig(e.to_string()))?;
        cfg.mean_mode = self.mean_mode;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training objective per epoch.
    pub loss_history: Vec<f64>,
    /// Range of every per-sample weight used, `None` in sft mode.
    pub weight_range: Option<(f64, f64)>,
    pub steps: usize,
}

/// Per-token weights for one example under the current model.
fn example_weights<T: Scalar>(
    model: &ToyModel<T>,
    ex: &TrainExample,
    mode: Mode,
    cfg: &WeightConfig<T>,
) -> (T, Vec<T>) {
    match mode {
        Mode::Sft => (T::one(), vec![T::one(); ex.correct.len()]),
        Mode::Faft => {
            let pc = model.sequence_probs(&ex.correct);
            let pa = model.sequence_probs(&ex.incorrect);
            let hc = weighting::masked_mean_prob(&pc, &ex.hybrid_correct, cfg).expect("lengths match by construction");
            let ha =
                weighting::masked_mean_prob(&pa, &ex.hybrid_incorrect, cfg).expect("lengths match by construction");
            let w = weighting::dynamic_weight(hc, ha, cfg);
            (w, weighting::token_weights(&ex.hybrid_correct, w, cfg))
        }
    }
}

/// Gradient of the token-mean weighted loss over `batch`, with weights held
/// fixed. Returns `(loss, grad)`.
pub fn batch_grad<T: Scalar>(model: &ToyModel<T>, batch: &[&TrainExample], weights: &[Vec<T>]) -> (T, Vec<T>) {
    let tokens: usize = batch.iter().map(|ex| ex.correct.len()).sum();
    let scale = T::one() / T::from_usize(tokens.max(1));
    let mut grad = vec![T::zero(); model.theta.len()];
    let mut nll = T::zero();
    for (ex, w) in batch.iter().zip(weights) {
        nll = nll + model.accumulate_grad(&ex.correct, w, scale, &mut grad);
    }
    (nll * scale, grad)
}

/// Weighted loss only, no gradient.
pub fn batch_loss<T: Scalar>(model: &ToyModel<T>, batch: &[&TrainExample], weights: &[Vec<T>]) -> T {
    let logprobs: Vec<Vec<T>> =
        batch.iter().map(|ex| model.sequence_probs(&ex.correct).into_iter().map(T::ln).collect()).collect();
    weighting::faft_loss(&logprobs, weights).unwrap_or_else(|_| T::nan())
}

/// Plain minibatch gradient descent from a seeded initialization.
pub fn train<T: Scalar>(examples: &[TrainExample], cfg: &TrainConfig) -> Result<(ToyModel<T>, TrainReport), ToyError> {
    if examples.is_empty() {
        return Err(ToyError::EmptyCorpus);
    }
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(ToyError::InvalidConfig("batch size and learning rate must be positive".into()));
    }
    let wcfg = cfg.weight_config::<T>()?;
    let mut rng = ToyRng::new(cfg.seed);
    let mut model = ToyModel::<T>::init(VOCAB_SIZE, cfg.dim, INIT_SCALE, &mut rng);
    let lr = T::lit(cfg.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut weight_range: Option<(f64, f64)> = None;
    let mut steps = 0;

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let epoch_weights: Option<Vec<(T, Vec<T>)>> = match cfg.refresh {
            WeightRefresh::PerEpoch => {
                Some(examples.iter().map(|ex| example_weights(&model, ex, cfg.mode, &wcfg)).collect())
            }
            WeightRefresh::PerBatch => None,
        };
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (scalars, weights): (Vec<T>, Vec<Vec<T>>) = match &epoch_weights {
                Some(all) => chunk.iter().map(|&i| all[i].clone()).unzip(),
                None => batch.iter().map(|ex| example_weights(&model, ex, cfg.mode, &wcfg)).unzip(),
            };
            if cfg.mode == Mode::Faft {
                for w in scalars {
                    let w = w.as_f64();
                    debug_assert!(w >= cfg.alpha - 1.0 && w <= cfg.alpha);
                    weight_range = Some(match weight_range {
                        Some((lo, hi)) => (lo.min(w), hi.max(w)),
                        None => (w, w),
                    });
                }
            }
            let (loss, grad) = batch_grad(&model, &batch, &weights);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ToyError::DivergenceDetected { epoch, step: steps });
            }
            for (p, g) in model.theta.iter_mut().zip(&grad) {
                *p = *p - lr * *g;
            }
            epoch_loss += loss.as_f64();
            batches += 1;
            steps += 1;
        }
        if !model.is_finite() {
            return Err(ToyError::DivergenceDetected { epoch, step: steps });
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok((model, TrainReport { loss_history: history, weight_range, steps }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub critical_prob_mean: f64,
    pub noncritical_prob_mean: f64,
    pub greedy_exact_match_rate: f64,
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode of `len` tokens from an empty context.
pub fn greedy_decode<T: Scalar>(model: &ToyModel<T>, len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let (p2, p1) = context(&out, t);
        out.push(argmax(&model.predict(p2, p1)));
    }
    out
}

pub fn evaluate<T: Scalar>(model: &ToyModel<T>, examples: &[TrainExample]) -> Metrics {
    let mut critical = 0.0;
    let mut noncritical = 0.0;
    let mut noncritical_n = 0usize;
    let mut exact = 0usize;
    for ex in examples {
        let probs = model.sequence_probs(&ex.correct);
        for (t, p) in probs.iter().enumerate() {
            if t == ex.task.critical_position {
                critical += p.as_f64();
            } else {
                noncritical += p.as_f64();
                noncritical_n += 1;
            }
        }
        if greedy_decode(model, ex.correct.len()) == ex.correct {
            exact += 1;
        }
    }
    let n = examples.len().max(1) as f64;
    Metrics {
        critical_prob_mean: critical / n,
        noncritical_prob_mean: noncritical / noncritical_n.max(1) as f64,
        greedy_exact_match_rate: exact as f64 / n,
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_SAMPLES: usize = 50;

/// Largest relative error between analytic and central-difference
/// gradients over randomly sampled parameters. In faft mode the per-sample
/// weights are computed once from the unperturbed model and held fixed.
///
/// The difference quotient `(L(theta + h) - L(theta - h)) / 2h` is formed
/// from per-token log-probability differences, which keeps it accurate for
/// parameters whose gradient is many orders below the loss itself.
pub fn grad_check(model: &ToyModel<f64>, batch: &[&TrainExample], mode: Mode, alpha: f64, seed: u64) -> f64 {
    let wcfg = WeightConfig::with_alpha(alpha).expect("valid alpha");
    let weights: Vec<Vec<f64>> = batch.iter().map(|ex| example_weights(model, ex, mode, &wcfg).1).collect();
    let (_, analytic) = batch_grad(model, batch, &weights);
    let tokens: usize = batch.iter().map(|ex| ex.correct.len()).sum();
    let mut rng = ToyRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_CHECK_SAMPLES {
        let i = rng.below(model.theta.len());
        let delta: f64 = batch
            .iter()
            .zip(&weights)
            .map(|(ex, w)| {
                let diffs = model.log_prob_differences(&ex.correct, i, GRAD_CHECK_STEP);
                diffs.iter().zip(w).map(|(d, w)| d * w).sum::<f64>()
            })
            .sum();
        let numeric = -delta / tokens as f64 / (2.0 * GRAD_CHECK_STEP);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// A freshly initialized model as used at the start of `train`.
pub fn initial_model<T: Scalar>(cfg: &TrainConfig) -> ToyModel<T> {
    let mut rng = ToyRng::new(cfg.seed);
    ToyModel::init(VOCAB_SIZE, cfg.dim, INIT_SCALE, &mut rng)
}

/// True when no epoch's loss exceeds the best earlier loss by more than
/// `jitter` (relative).
pub fn roughly_non_increasing(history: &[f64], jitter: f64) -> bool {
    let mut best = f64::INFINITY;
    for &l in history {
        if l > best * (1.0 + jitter) {
            return false;
        }
        best = best.min(l);
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub faft: Metrics,
    pub sft: Metrics,
    pub faft_history: Vec<f64>,
    pub sft_history: Vec<f64>,
    pub faft_weight_range: Option<(f64, f64)>,
}

impl SeedComparison {
    pub fn faft_wins(&self) -> bool {
        self.faft.critical_prob_mean >= self.sft.critical_prob_mean
    }

    /// Relative drop of the noncritical probability under faft.
    pub fn noncritical_degradation(&self) -> f64 {
        (self.sft.noncritical_prob_mean - self.faft.noncritical_prob_mean) / self.sft.noncritical_prob_mean
    }
}

/// Trains both arms on the corpus generated from each seed.
pub fn compare(seeds: &[u64], n_tasks: usize, base: &TrainConfig) -> Result<Vec<SeedComparison>, ToyError> {
    seeds
        .iter()
        .map(|&seed| {
            let corpus = super::corpus::gen_corpus(seed, n_tasks);
            let examples = super::corpus::prepare(&corpus).map_err(|e| ToyError::InvalidConfig(e.to_string()))?;
            let faft_cfg = TrainConfig { mode: Mode::Faft, seed, ..base.clone() };
            let sft_cfg = TrainConfig { mode: Mode::Sft, seed, ..base.clone() };
            let (faft_model, faft_report) = train::<f64>(&examples, &faft_cfg)?;
            let (sft_model, sft_report) = train::<f64>(&examples, &sft_cfg)?;
            Ok(SeedComparison {
                seed,
                faft: evaluate(&faft_model, &examples),
                sft: evaluate(&sft_model, &examples),
                faft_history: faft_report.loss_history,
                sft_history: sft_report.loss_history,
                faft_weight_range: faft_report.weight_range,
            })
        })
        .collect()
}

/// Side-by-side table of per-seed metrics plus the win count.
pub fn summary_table(rows: &[SeedComparison]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>6}  {:>12}  {:>12}  {:>12}  {:>12}  {:>9}  {:>9}  {:>4}\n",
        "seed", "faft_crit", "sft_crit", "faft_noncrit", "sft_noncrit", "faft_em", "sft_em", "win"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:>6}  {:>12.6}  {:>12.6}  {:>12.6}  {:>12.6}  {:>9.4}  {:>9.4}  {:>4}\n",
            r.seed,
            r.faft.critical_prob_mean,
            r.sft.critical_prob_mean,
            r.faft.noncritical_prob_mean,
            r.sft.noncritical_prob_mean,
            r.faft.greedy_exact_match_rate,
            r.sft.greedy_exact_match_rate,
            if r.faft_wins() { "yes" } else { "no" }
        ));
    }
    let wins = rows.iter().filter(|r| r.faft_wins()).count();
    out.push_str(&format!("faft critical-token probability >= sft in {wins} of {} seeds\n", rows.len()));
    out
}
