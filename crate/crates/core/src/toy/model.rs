//! Trigram neural language model with hand-written gradients.
//!
//! `p(next | prev2, prev1) = softmax(U [E[prev1]; E[prev2]] + b)`. Positions
//! before the start of a sequence see the `BOS` token as context.

use super::corpus::BOS;
use super::rng::ToyRng;
use crate::scalar::Scalar;

/// All parameters live in one flat vector: embeddings `E` (V x d), output
/// map `U` (V x 2d), bias `b` (V).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub vocab: usize,
    pub dim: usize,
    pub theta: Vec<T>,
}

impl<T: Scalar> ToyModel<T> {
    pub fn param_count(vocab: usize, dim: usize) -> usize {
        vocab * dim + vocab * 2 * dim + vocab
    }

    pub fn zeros(vocab: usize, dim: usize) -> Self {
        ToyModel { vocab, dim, theta: vec![T::zero(); Self::param_count(vocab, dim)] }
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn init(vocab: usize, dim: usize, scale: f64, rng: &mut ToyRng) -> Self {
        let theta = (0..Self::param_count(vocab, dim)).map(|_| T::lit((2.0 * rng.next_f64() - 1.0) * scale)).collect();
        ToyModel { vocab, dim, theta }
    }

    fn out_offset(&self) -> usize {
        self.vocab * self.dim
    }

    fn bias_offset(&self) -> usize {
        self.vocab * self.dim * 3
    }

    pub fn embedding(&self, token: usize) -> &[T] {
        &self.theta[token * self.dim..(token + 1) * self.dim]
    }

    pub fn bias(&self) -> &[T] {
        &self.theta[self.bias_offset()..]
    }

    /// Index range of the bias within `theta`.
    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset()..self.theta.len()
    }

    fn hidden(&self, prev2: usize, prev1: usize) -> Vec<T> {
        let mut h = Vec::with_capacity(2 * self.dim);
        h.extend_from_slice(self.embedding(prev1));
        h.extend_from_slice(self.embedding(prev2));
        h
    }

    /// Next-token distribution.
    pub fn predict(&self, prev2: usize, prev1: usize) -> Vec<T> {
        softmax(&self.logits(&self.hidden(prev2, prev1)))
    }

    fn logits(&self, h: &[T]) -> Vec<T> {
        let width = 2 * self.dim;
        let out = &self.theta[self.out_offset()..self.bias_offset()];
        let bias = self.bias();
        (0..self.vocab)
            .map(|k| out[k * width..(k + 1) * width].iter().zip(h).map(|(&u, &x)| u * x).sum::<T>() + bias[k])
            .collect()
    }

    /// Teacher-forced probability of every token in `seq`.
    pub fn sequence_probs(&self, seq: &[usize]) -> Vec<T> {
        (0..seq.len())
            .map(|t| {
                let (p2, p1) = context(seq, t);
                self.predict(p2, p1)[seq[t]]
            })
            .collect()
    }

    /// Adds `scale * d(sum_t w_t * -log p(seq_t))/d theta` into `grad` and
    /// returns the weighted negative log-likelihood sum.
    pub fn accumulate_grad(&self, seq: &[usize], weights: &[T], scale: T, grad: &mut [T]) -> T {
        let d = self.dim;
        let width = 2 * d;
        let (out_off, bias_off) = (self.out_offset(), self.bias_offset());
        let mut nll = T::zero();
        let mut dh = vec![T::zero(); width];
        for (t, &w) in weights.iter().enumerate().take(seq.len()) {
            let (p2, p1) = context(seq, t);
            let h = self.hidden(p2, p1);
            let mut probs = softmax(&self.logits(&h));
            nll = nll - w * probs[seq[t]].ln();
            // d(-log p_y)/d logits = softmax - onehot(y)
            probs[seq[t]] = probs[seq[t]] - T::one();
            dh.iter_mut().for_each(|x| *x = T::zero());
            let coef = w * scale;
            for (k, &g) in probs.iter().enumerate() {
                let g = g * coef;
                grad[bias_off + k] = grad[bias_off + k] + g;
                let row = out_off + k * width;
                for i in 0..width {
                    grad[row + i] = grad[row + i] + g * h[i];
                    dh[i] = dh[i] + g * self.theta[row + i];
                }
            }
            for i in 0..d {
                grad[p1 * d + i] = grad[p1 * d + i] + dh[i];
                grad[p2 * d + i] = grad[p2 * d + i] + dh[d + i];
            }
        }
        nll
    }

    /// Per-token `ln p(seq_t)` at `theta + step e_j` minus the same at
    /// `theta - step e_j`.
    ///
    /// Only the logits that depend on parameter `j` move, so the difference
    /// is assembled from those logit shifts through `ln_1p`/`exp_m1` instead
    /// of subtracting two nearly equal log-probabilities.
    pub fn log_prob_differences(&self, seq: &[usize], j: usize, step: T) -> Vec<T> {
        let d = self.dim;
        let width = 2 * d;
        let (out_off, bias_off) = (self.out_offset(), self.bias_offset());
        let mut minus = self.clone();
        minus.theta[j] = self.theta[j] - step;
        let shift = (self.theta[j] + step) - minus.theta[j];
        let out = &minus.theta[out_off..bias_off];
        (0..seq.len())
            .map(|t| {
                let (p2, p1) = context(seq, t);
                let h = minus.hidden(p2, p1);
                let q = softmax(&minus.logits(&h));
                let mut moved = vec![T::zero(); self.vocab];
                if j >= bias_off {
                    moved[j - bias_off] = shift;
                } else if j >= out_off {
                    let r = j - out_off;
                    moved[r / width] = shift * h[r % width];
                } else {
                    let (tok, i) = (j / d, j % d);
                    let cols = [(p1 == tok, i), (p2 == tok, d + i)];
                    for (k, m) in moved.iter_mut().enumerate() {
                        *m = cols.iter().filter(|(hit, _)| *hit).map(|&(_, c)| out[k * width + c] * shift).sum();
                    }
                }
                let growth: T = q.iter().zip(&moved).map(|(&qk, &mk)| qk * mk.exp_m1()).sum();
                moved[seq[t]] - growth.ln_1p()
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }
}

/// `(prev2, prev1)` context for position `t`.
pub fn context(seq: &[usize], t: usize) -> (usize, usize) {
    let p1 = if t >= 1 { seq[t - 1] } else { BOS };
    let p2 = if t >= 2 { seq[t - 2] } else { BOS };
    (p2, p1)
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_is_uniform() {
        let m = ToyModel::<f64>::zeros(64, 16);
        for p in m.predict(3, 4) {
            assert!((p - 1.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ToyRng::new(5);
        let m = ToyModel::<f64>::init(64, 16, 2.0, &mut rng);
        for (a, b) in [(0, 0), (5, 60), (63, 1)] {
            let s: f64 = m.predict(a, b).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let s: f32 = softmax(&[1000.0f32, 0.0, -1000.0]).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bias_gradient_at_origin_is_softmax_minus_onehot() {
        let m = ToyModel::<f64>::zeros(8, 2);
        let mut grad = vec![0.0; m.theta.len()];
        m.accumulate_grad(&[3], &[1.0], 1.0, &mut grad);
        let bias = &grad[m.bias_range()];
        for (k, &g) in bias.iter().enumerate() {
            let expected = 1.0 / 8.0 - if k == 3 { 1.0 } else { 0.0 };
            assert!((g - expected).abs() < 1e-15);
        }
        // Hidden state is zero, so U and E receive nothing.
        assert!(grad[..m.bias_range().start].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn log_prob_differences_match_direct_subtraction() {
        let mut rng = ToyRng::new(9);
        let m = ToyModel::<f64>::init(16, 4, 0.5, &mut rng);
        let seq = [3, 3, 7, 1, 3, 9];
        let step = 1e-3;
        for j in [0, 3 * 4 + 1, 9 * 4 + 2, 16 * 4 + 5, 16 * 4 + 33, m.bias_range().start + 3, m.theta.len() - 1] {
            let mut plus = m.clone();
            let mut minus = m.clone();
            plus.theta[j] += step;
            minus.theta[j] -= step;
            let direct: Vec<f64> = plus
                .sequence_probs(&seq)
                .iter()
                .zip(minus.sequence_probs(&seq))
                .map(|(a, b)| a.ln() - b.ln())
                .collect();
            for (got, want) in m.log_prob_differences(&seq, j, step).iter().zip(&direct) {
                assert!((got - want).abs() < 1e-12, "param {j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn f32_model_runs() {
        let mut rng = ToyRng::new(1);
        let m = ToyModel::<f32>::init(16, 4, 0.1, &mut rng);
        let p = m.sequence_probs(&[1, 2, 3]);
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
