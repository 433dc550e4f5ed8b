//! Dynamic importance reweighting of error-sensitive tokens.
//!
//! For one sample, the model's ground-truth probabilities on the correct and
//! incorrect code are averaged over the error-sensitive tokens of each side
//! (the masked means `h_c` and `h_a`). The sample's weight is
//!
//! ```text
//! W = alpha - |(h_c - h_a) / (h_c + h_a)|
//! ```
//!
//! which lies in `[alpha - 1, alpha]`: close to `alpha` when the model cannot
//! tell the two sides apart and close to `alpha - 1` once it can. `W` is
//! applied to every error-sensitive token of the correct code; shared tokens
//! get `alpha - 1`. `W` is a constant with respect to differentiation.
//!
//! All functions are generic over the float type.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Record, Schema};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("alpha must be finite and at least 1, got {0}")]
    InvalidAlpha(f64),
    #[error("log-probabilities must be finite")]
    NonFinite,
}

/// How the masked mean treats hybrid values of 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanMode {
    /// `sum(p * h) / sum(h)`: doubly-changed tokens count twice.
    #[default]
    HybridWeighted,
    /// Plain mean over tokens with a nonzero hybrid value.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightConfig<T> {
    pub alpha: T,
    /// Lower clamp for probabilities and guard on the denominator.
    pub epsilon: T,
    pub mean_mode: MeanMode,
}

fn lit<T: Float>(x: f64) -> T {
    T::from(x).expect("literal representable in float type")
}

impl<T: Float> Default for WeightConfig<T> {
    fn default() -> Self {
        WeightConfig { alpha: lit(2.0), epsilon: lit(1e-8), mean_mode: MeanMode::HybridWeighted }
    }
}

impl<T: Float> WeightConfig<T> {
    pub fn with_alpha(alpha: T) -> Result<Self, WeightError> {
        if !alpha.is_finite() || alpha < T::one() {
            return Err(WeightError::InvalidAlpha(alpha.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(WeightConfig { alpha, ..Default::default() })
    }

    /// Weight of tokens shared by both sides, `alpha - 1`.
    pub fn shared_weight(&self) -> T {
        self.alpha - T::one()
    }
}

/// Masked mean probability; `None` when no token is marked.
pub fn masked_mean_prob<T: Float>(probs: &[T], hybrid: &[u8], cfg: &WeightConfig<T>) -> Result<Option<T>, WeightError> {
    if probs.len() != hybrid.len() {
        return Err(WeightError::LengthMismatch { left: probs.len(), right: hybrid.len() });
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for (&p, &h) in probs.iter().zip(hybrid) {
        if h == 0 {
            continue;
        }
        let p = p.max(cfg.epsilon).min(T::one());
        let w = match cfg.mean_mode {
            MeanMode::HybridWeighted => T::from(h).expect("small int"),
            MeanMode::Plain => T::one(),
        };
        num = num + p * w;
        den = den + w;
    }
    Ok(if den > T::zero() { Some(num / den) } else { None })
}

/// The per-sample weight `W`.
///
/// Returns `alpha` when either mean is undefined or their sum is below
/// epsilon.
pub fn dynamic_weight<T: Float>(h_correct: Option<T>, h_incorrect: Option<T>, cfg: &WeightConfig<T>) -> T {
    let (hc, ha) = match (h_correct, h_incorrect) {
        (Some(c), Some(a)) => (c, a),
        _ => return cfg.alpha,
    };
    let sum = hc + ha;
    if sum.is_nan() || sum < cfg.epsilon {
        return cfg.alpha;
    }
    let gap = ((hc - ha) / sum).abs().min(T::one());
    cfg.alpha - gap
}

/// `W` on error-sensitive tokens, `alpha - 1` elsewhere.
pub fn token_weights<T: Float>(hybrid_correct: &[u8], weight: T, cfg: &WeightConfig<T>) -> Vec<T> {
    let shared = cfg.shared_weight();
    hybrid_correct.iter().map(|&h| if h > 0 { weight } else { shared }).collect()
}

/// Negative mean log-probability over every response token in the batch.
pub fn sft_loss<T: Float, S: AsRef<[T]>>(logprobs: &[S]) -> Result<T, WeightError> {
    let mut total = T::zero();
    let mut count = 0usize;
    for seq in logprobs {
        for &lp in seq.as_ref() {
            if !lp.is_finite() {
                return Err(WeightError::NonFinite);
            }
            total = total + lp;
            count += 1;
        }
    }
    Ok(if count == 0 { T::zero() } else { -total / T::from(count).expect("count") })
}

/// Negative token-mean of `w * log p` over the batch.
pub fn faft_loss<T: Float, S: AsRef<[T]>, V: AsRef<[T]>>(logprobs: &[S], weights: &[V]) -> Result<T, WeightError> {
    if logprobs.len() != weights.len() {
        return Err(WeightError::LengthMismatch { left: logprobs.len(), right: weights.len() });
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (lp, w) in logprobs.iter().zip(weights) {
        let (lp, w) = (lp.as_ref(), w.as_ref());
        if lp.len() != w.len() {
            return Err(WeightError::LengthMismatch { left: lp.len(), right: w.len() });
        }
        for (&l, &wj) in lp.iter().zip(w) {
            if !l.is_finite() {
                return Err(WeightError::NonFinite);
            }
            total = total + wj * l;
            count += 1;
        }
    }
    Ok(if count == 0 { T::zero() } else { -total / T::from(count).expect("count") })
}

/// Everything computed for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights<T> {
    pub h_correct: Option<T>,
    pub h_incorrect: Option<T>,
    pub weight: T,
    pub token_weights: Vec<T>,
    pub faft_loss: T,
    pub sft_loss: T,
}

/// Weights and both losses for one sample from its probability traces.
pub fn weigh_sample<T: Float>(
    probs_correct: &[T],
    probs_incorrect: &[T],
    hybrid_correct: &[u8],
    hybrid_incorrect: &[u8],
    cfg: &WeightConfig<T>,
) -> Result<SampleWeights<T>, WeightError> {
    let h_correct = masked_mean_prob(probs_correct, hybrid_correct, cfg)?;
    let h_incorrect = masked_mean_prob(probs_incorrect, hybrid_incorrect, cfg)?;
    let weight = dynamic_weight(h_correct, h_incorrect, cfg);
    let token_weights = token_weights(hybrid_correct, weight, cfg);
    let logprobs: Vec<T> = probs_correct.iter().map(|p| p.max(cfg.epsilon).min(T::one()).ln()).collect();
    let faft_loss = faft_loss(&[&logprobs], &[&token_weights])?;
    let sft_loss = sft_loss(&[&logprobs])?;
    Ok(SampleWeights { h_correct, h_incorrect, weight, token_weights, faft_loss, sft_loss })
}

/// One line of the reference weighting output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedLossReport {
    pub id: String,
    pub h_correct: Option<f64>,
    pub h_incorrect: Option<f64>,
    pub weight: f64,
    pub token_weights: Vec<f64>,
    pub faft_loss: f64,
    pub sft_loss: f64,
}

impl WeightedLossReport {
    pub fn new(id: &str, s: &SampleWeights<f64>) -> Self {
        WeightedLossReport {
            id: id.to_string(),
            h_correct: s.h_correct,
            h_incorrect: s.h_incorrect,
            weight: s.weight,
            token_weights: s.token_weights.clone(),
            faft_loss: s.faft_loss,
            sft_loss: s.sft_loss,
        }
    }
}

impl Record for WeightedLossReport {
    const SCHEMA: Schema = Schema::Report;
    const REQUIRED: &'static [&'static str] =
        &["id", "h_correct", "h_incorrect", "weight", "token_weights", "faft_loss", "sft_loss"];

    fn id(&self) -> &str {
        &self.id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WeightConfig<f64> {
        WeightConfig::default()
    }

    #[test]
    fn masked_means() {
        let m = masked_mean_prob(&[0.5, 0.9, 0.1], &[0, 1, 1], &cfg()).unwrap();
        assert!((m.unwrap() - 0.5).abs() < 1e-15);
        let m = masked_mean_prob(&[0.6, 0.2], &[2, 1], &cfg()).unwrap().unwrap();
        assert!((m - 1.4 / 3.0).abs() < 1e-15);
        assert_eq!(masked_mean_prob(&[0.6, 0.2], &[0, 0], &cfg()).unwrap(), None);
        assert!(matches!(masked_mean_prob(&[0.1], &[], &cfg()), Err(WeightError::LengthMismatch { .. })));

        let plain = WeightConfig { mean_mode: MeanMode::Plain, ..cfg() };
        let m = masked_mean_prob(&[0.6, 0.2], &[2, 1], &plain).unwrap().unwrap();
        assert!((m - 0.4).abs() < 1e-15);
    }

    #[test]
    fn probabilities_are_clamped() {
        let m = masked_mean_prob(&[0.0, 1.5], &[1, 1], &cfg()).unwrap().unwrap();
        assert!((m - (1e-8 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(dynamic_weight(Some(0.4), Some(0.4), &cfg()), 2.0);
        assert!((dynamic_weight(Some(0.9), Some(0.1), &cfg()) - 1.2).abs() < 1e-12);
        assert_eq!(dynamic_weight(Some(0.5), Some(0.0), &cfg()), 1.0);
        assert_eq!(dynamic_weight(None, Some(0.3), &cfg()), 2.0);
        assert_eq!(dynamic_weight(Some(0.0), Some(0.0), &cfg()), 2.0);
    }

    #[test]
    fn weight_in_f32() {
        let c = WeightConfig::<f32>::default();
        assert_eq!(dynamic_weight(Some(0.5f32), Some(0.0), &c), 1.0f32);
    }

    #[test]
    fn two_level_token_weights() {
        assert_eq!(token_weights(&[0, 1, 2], 1.7, &cfg()), vec![1.0, 1.7, 1.7]);
        assert_eq!(token_weights(&[0, 0], 1.7, &cfg()), vec![1.0, 1.0]);
        assert_eq!(token_weights(&[2, 1, 0], 2.0, &cfg()), vec![2.0, 2.0, 1.0]);
    }

    #[test]
    fn losses() {
        assert_eq!(sft_loss(&[vec![-0.5, -1.5]]).unwrap(), 1.0);
        assert_eq!(sft_loss(&[vec![0.0, 0.0]]).unwrap(), 0.0);
        assert_eq!(sft_loss(&[vec![-1.0], vec![-3.0]]).unwrap(), 2.0);
        assert_eq!(faft_loss(&[vec![-1.0, -1.0]], &[vec![1.0, 2.0]]).unwrap(), 1.5);

        let lp = [vec![-0.3, -2.0], vec![-1.1]];
        let unit = [vec![1.0, 1.0], vec![1.0]];
        let double = [vec![2.0, 2.0], vec![2.0]];
        assert_eq!(faft_loss(&lp, &unit).unwrap(), sft_loss(&lp).unwrap());
        assert_eq!(faft_loss(&lp, &double).unwrap(), 2.0 * faft_loss(&lp, &unit).unwrap());
        assert!(faft_loss(&lp, &[vec![1.0], vec![1.0]]).is_err());
        assert_eq!(sft_loss(&[vec![f64::NEG_INFINITY]]), Err(WeightError::NonFinite));
    }

    #[test]
    fn alpha_validation() {
        assert!(WeightConfig::with_alpha(0.5f64).is_err());
        assert!(WeightConfig::with_alpha(f64::NAN).is_err());
        assert_eq!(WeightConfig::with_alpha(3.0f64).unwrap().shared_weight(), 2.0);
    }

    #[test]
    fn unit_weights_when_alpha_two_and_nothing_marked() {
        let s = weigh_sample(&[0.5, 0.25], &[0.5, 0.25], &[0, 0], &[0, 0], &cfg()).unwrap();
        assert_eq!(s.weight, 2.0);
        assert_eq!(s.token_weights, vec![1.0, 1.0]);
        assert_eq!(s.faft_loss, s.sft_loss);
    }
}
