//! Discrete entropy of quantized message batches and its pseudo gradient.
//!
//! Entropy is measured in bits. A batch of `N` messages with `L` digits
//! each is binned digit by digit; each digit contributes
//! `-Σ_k (N_k/N)·log2(N_k/N)` with `N_k = ε + count_k`, and the batch
//! entropy is the sum over digits.
//!
//! The true derivative of that quantity with respect to a message value is
//! zero almost everywhere. The pseudo gradient replaces `∂h_k/∂m` with the
//! sign weight `s_k(m)` from [`Quantizer::sign_weight`], which for a value
//! strictly between grid points `u` and `u + 1` collapses to
//! `-(1/N)·log2(N_{u+1} / N_u)`: values drift toward the more populated of
//! the two neighbouring bins.

pub mod lemma;

use std::f64::consts::LOG2_E;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantization::Quantizer;

pub const DEFAULT_EPSILON: f64 = 1e-10;

/// `N` messages of `L` digits, row-major, every entry in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageBatch {
    values: Vec<f64>,
    n: usize,
    len: usize,
}

impl MessageBatch {
    pub fn new(values: Vec<f64>, n: usize, len: usize) -> Result<Self> {
        if n == 0 || len == 0 {
            return Err(Error::InvalidBatch(format!("need n >= 1 and L >= 1, got n={n} L={len}")));
        }
        if values.len() != n * len {
            return Err(Error::InvalidBatch(format!(
                "{} values for a {n}x{len} batch",
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange { value: bad });
        }
        Ok(MessageBatch { values, n, len })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let len = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != len) {
            return Err(Error::InvalidBatch("rows differ in length".into()));
        }
        let values = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(values, rows.len(), len)
    }

    /// A batch of one-digit messages.
    pub fn single_digit(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, n, 1)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.len..(i + 1) * self.len]
    }

    #[inline]
    pub fn get(&self, i: usize, digit: usize) -> f64 {
        self.values[i * self.len + digit]
    }

    pub fn digit(&self, digit: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(digit).step_by(self.len).copied()
    }

    fn check_digit(&self, digit: usize) -> Result<()> {
        if digit < self.len {
            Ok(())
        } else {
            Err(Error::DigitOutOfRange {
                digit,
                len: self.len,
            })
        }
    }
}

/// Per-bin counts of one digit across a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitHistogram {
    counts: Vec<u64>,
    epsilon: f64,
}

impl DigitHistogram {
    pub fn from_counts(counts: Vec<u64>, epsilon: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidCounts("histogram needs at least one bin".into()));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidCounts(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        Ok(DigitHistogram { counts, epsilon })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of messages `N` (smoothing excluded).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `N_k = ε + count_k`.
    #[inline]
    pub fn smoothed(&self, k: usize) -> f64 {
        self.epsilon + self.counts[k] as f64
    }

    pub fn entropy_bits(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        (0..self.counts.len())
            .map(|k| {
                let p = self.smoothed(k) / n;
                if p > 0.0 {
                    -p * p.log2()
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// `∂H/∂h_k` for every bin, treating the counts as continuous.
    fn count_sensitivities(&self) -> Vec<f64> {
        let n = self.total() as f64;
        (0..self.counts.len())
            .map(|k| -((self.smoothed(k) / n).log2() + LOG2_E) / n)
            .collect()
    }
}

pub fn histogram(batch: &MessageBatch, digit: usize, q: &Quantizer) -> Result<DigitHistogram> {
    batch.check_digit(digit)?;
    let mut counts = vec![0u64; q.num_bins()];
    for x in batch.digit(digit) {
        counts[q.bin_index(x)?] += 1;
    }
    DigitHistogram::from_counts(counts, 0.0)
}

/// Entropy in bits of one digit column.
pub fn digit_entropy(batch: &MessageBatch, digit: usize, q: &Quantizer, epsilon: f64) -> Result<f64> {
    Ok(histogram(batch, digit, q)?.with_epsilon(epsilon).entropy_bits())
}

/// Batch entropy in bits: the sum of per-digit entropies.
pub fn entropy(batch: &MessageBatch, q: &Quantizer, epsilon: f64) -> Result<f64> {
    (0..batch.len()).map(|d| digit_entropy(batch, d, q, epsilon)).sum()
}

/// Same shape as the batch it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGradient {
    grads: Vec<f64>,
    n: usize,
    len: usize,
}

impl PseudoGradient {
    pub fn values(&self) -> &[f64] {
        &self.grads
    }

    pub fn into_values(self) -> Vec<f64> {
        self.grads
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, digit: usize) -> f64 {
        self.grads[i * self.len + digit]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.grads[i * self.len..(i + 1) * self.len]
    }
}

/// Upper bound on `|∇ᵖ|` for a batch of `n` messages: the largest count
/// ratio a single digit can produce is `(n + ε) / ε`.
pub fn gradient_bound(n: usize, epsilon: f64) -> f64 {
    let n = n as f64;
    ((n + epsilon) / epsilon).log2() / n
}

/// Pseudo gradient of one value against a frozen histogram:
/// `Σ_k ∂H/∂h_k · s_k(x)`.
pub fn pseudo_gradient_value(x: f64, hist: &DigitHistogram, q: &Quantizer) -> Result<f64> {
    let sens = hist.count_sensitivities();
    weighted_sensitivity(x, &sens, q)
}

fn weighted_sensitivity(x: f64, sens: &[f64], q: &Quantizer) -> Result<f64> {
    let mut g = 0.0;
    for (k, &dk) in sens.iter().enumerate() {
        match q.sign_weight(x, k)? {
            0 => {}
            s => g += f64::from(s) * dk,
        }
    }
    Ok(g)
}

pub fn pseudo_gradient(batch: &MessageBatch, q: &Quantizer, epsilon: f64) -> Result<PseudoGradient> {
    let mut grads = vec![0.0; batch.values.len()];
    for d in 0..batch.len() {
        let sens = histogram(batch, d, q)?.with_epsilon(epsilon).count_sensitivities();
        for i in 0..batch.n() {
            grads[i * batch.len + d] = weighted_sensitivity(batch.get(i, d), &sens, q)?;
        }
    }
    Ok(PseudoGradient {
        grads,
        n: batch.n,
        len: batch.len,
    })
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidBatch(format!("step size must be positive, got {eta}")))
    }
}

/// One simultaneous pseudo-gradient step on every value, with histograms
/// frozen at their pre-step state. Results are clamped to `[-1, 1]`.
pub fn pseudo_step(batch: &MessageBatch, eta: f64, q: &Quantizer, epsilon: f64) -> Result<MessageBatch> {
    check_eta(eta)?;
    let grad = pseudo_gradient(batch, q, epsilon)?;
    let values = batch
        .values
        .iter()
        .zip(&grad.grads)
        .map(|(&m, &g)| (m - eta * g).clamp(-1.0, 1.0))
        .collect();
    Ok(MessageBatch { values, ..*batch })
}

/// Pseudo-gradient step on a single value `(index, digit)`; everything else
/// is left untouched.
pub fn pseudo_step_single(
    batch: &MessageBatch,
    index: usize,
    digit: usize,
    eta: f64,
    q: &Quantizer,
    epsilon: f64,
) -> Result<MessageBatch> {
    check_eta(eta)?;
    batch.check_digit(digit)?;
    if index >= batch.n {
        return Err(Error::MessageOutOfRange { index, n: batch.n });
    }
    let hist = histogram(batch, digit, q)?.with_epsilon(epsilon);
    let m = batch.get(index, digit);
    let g = pseudo_gradient_value(m, &hist, q)?;
    let mut out = batch.clone();
    out.values[index * batch.len + digit] = (m - eta * g).clamp(-1.0, 1.0);
    Ok(out)
}

/// Entropy change (bits) when one message moves out of the less populated of
/// two adjacent bins into the more populated one: `(N_u, N_{u+1})` becomes
/// `(N_u + 1, N_{u+1} - 1)` if `N_u > N_{u+1}`, or `(N_u - 1, N_{u+1} + 1)`
/// if `N_u < N_{u+1}`. Negative whenever the counts are admissible.
pub fn lemma3_delta(nu: u64, nu1: u64, n: u64) -> Result<f64> {
    if nu == nu1 {
        return Err(Error::InvalidCounts(format!("equal counts {nu} give no preferred direction")));
    }
    if nu.min(nu1) < 1 {
        return Err(Error::InvalidCounts("the smaller bin must hold at least one message".into()));
    }
    if n < nu + nu1 {
        return Err(Error::InvalidCounts(format!("N={n} smaller than N_u + N_u+1 = {}", nu + nu1)));
    }
    let f = |c: u64| {
        let p = c as f64 / n as f64;
        if p > 0.0 {
            p * p.log2()
        } else {
            0.0
        }
    };
    let (big, small) = if nu > nu1 { (nu, nu1) } else { (nu1, nu) };
    Ok(f(big) + f(small) - f(big + 1) - f(small - 1))
}
