//! Randomized checks of the single-variable descent guarantees.
//!
//! Each trial draws a batch, picks one message digit, takes an admissible
//! pseudo-gradient step on it (`eta·|grad| < delta/2`) and then checks:
//!
//! * sign: the gradient sign equals `sign(log(N_u / N_{u+1}))`;
//! * transfer: bin counts are either unchanged or move by exactly one unit
//!   from the less populated to the more populated neighbour;
//! * monotonicity: entropy does not increase (tolerance `1e-12` bits).
//!
//! The entropy before and after is recomputed by [`reference_entropy`],
//! which scans interval membership directly instead of going through
//! [`Quantizer::bin_index`] and [`DigitHistogram`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{histogram, pseudo_gradient, pseudo_step_single, MessageBatch, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::quantization::Quantizer;

pub const ENTROPY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LemmaReport {
    pub trials: usize,
    /// Trials whose step actually moved the chosen value.
    pub updates: usize,
    /// Trials where the move carried the value across a bin edge.
    pub transfers: usize,
    pub sign_violations: usize,
    pub transfer_violations: usize,
    pub monotonicity_violations: usize,
    /// Largest observed `H(after) - H(before)`.
    pub max_entropy_change: f64,
}

impl LemmaReport {
    pub fn violations(&self) -> usize {
        self.sign_violations + self.transfer_violations + self.monotonicity_violations
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }
}

/// Entropy of one digit column computed by scanning every bin's interval.
pub fn reference_entropy(values: &[f64], q: &Quantizer, epsilon: f64) -> f64 {
    let delta = q.delta();
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for &x in values {
        let k = (0..=q.k_max())
            .find(|&k| {
                let lo = (k as f64 - 0.5) * delta - 1.0;
                let hi = (k as f64 + 0.5) * delta - 1.0;
                x >= lo && (x < hi || k == q.k_max())
            })
            .expect("value inside [-1, 1]");
        *counts.entry(k).or_default() += 1;
    }
    let n = values.len() as f64;
    (0..=q.k_max())
        .map(|k| {
            let p = (epsilon + *counts.get(&k).unwrap_or(&0) as f64) / n;
            if p > 0.0 {
                -p * p.log2()
            } else {
                0.0
            }
        })
        .sum()
}

/// How a trial's batch is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchShape {
    /// Skewed bin occupancy with some values placed exactly on grid points.
    Random,
    /// Every value on a grid point.
    GridOnly,
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, q: &Quantizer, shape: BatchShape) -> Vec<f64> {
    let weights: Vec<f64> = (0..q.num_bins())
        .map(|_| -rng.random::<f64>().max(1e-12).ln())
        .map(|w| w * w)
        .collect();
    let total: f64 = weights.iter().sum();
    (0..n)
        .map(|_| {
            let mut r = rng.random::<f64>() * total;
            let mut k = 0;
            while k < q.k_max() && r >= weights[k] {
                r -= weights[k];
                k += 1;
            }
            let g = q.grid(k);
            if shape == BatchShape::GridOnly || rng.random_bool(0.05) {
                return g;
            }
            let half = q.delta() / 2.0;
            let x = g + rng.random_range(-half..half);
            x.clamp(-1.0, 1.0)
        })
        .collect()
}

pub fn run(trials: usize, seed: u64) -> Result<LemmaReport> {
    run_with(trials, seed, BatchShape::Random)
}

pub fn run_with(trials: usize, seed: u64, shape: BatchShape) -> Result<LemmaReport> {
    if trials == 0 {
        return Err(Error::Config("lemma check needs at least one trial".into()));
    }
    let q = Quantizer::default();
    let eps = DEFAULT_EPSILON;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LemmaReport {
        trials,
        max_entropy_change: f64::NEG_INFINITY,
        ..Default::default()
    };

    for _ in 0..trials {
        let n = rng.random_range(2..=200);
        let values = random_batch(&mut rng, n, &q, shape);
        let batch = MessageBatch::single_digit(values.clone())?;
        let i = rng.random_range(0..n);
        let x = values[i];

        let grad = pseudo_gradient(&batch, &q, eps)?.get(i, 0);
        let eta = if grad == 0.0 {
            1.0
        } else {
            rng.random_range(0.05..0.999) * (q.delta() / 2.0) / grad.abs()
        };
        let after = pseudo_step_single(&batch, i, 0, eta, &q, eps)?;
        let x_new = after.get(i, 0);
        if x_new != x {
            report.updates += 1;
        }

        let before_counts = histogram(&batch, 0, &q)?;
        let after_counts = histogram(&after, 0, &q)?;
        let (c0, c1) = (before_counts.counts(), after_counts.counts());

        match q.enclosing_cell(x)? {
            None => {
                if grad != 0.0 {
                    report.sign_violations += 1;
                }
                if c0 != c1 {
                    report.transfer_violations += 1;
                }
            }
            Some(u) => {
                let (nu, nu1) = (c0[u] as f64 + eps, c0[u + 1] as f64 + eps);
                let expected_sign = (nu / nu1).ln().partial_cmp(&0.0);
                if grad.partial_cmp(&0.0) != expected_sign {
                    report.sign_violations += 1;
                }
                let changed: Vec<usize> = (0..c0.len()).filter(|&k| c0[k] != c1[k]).collect();
                let ok = if changed.is_empty() {
                    true
                } else if c0[u] > c0[u + 1] {
                    changed == [u, u + 1] && c1[u] == c0[u] + 1 && c1[u + 1] + 1 == c0[u + 1]
                } else if c0[u] < c0[u + 1] {
                    changed == [u, u + 1] && c1[u] + 1 == c0[u] && c1[u + 1] == c0[u + 1] + 1
                } else {
                    false
                };
                if !changed.is_empty() {
                    report.transfers += 1;
                }
                if !ok {
                    report.transfer_violations += 1;
                }
            }
        }

        let h0 = reference_entropy(&values, &q, eps);
        let h1 = reference_entropy(after.values(), &q, eps);
        report.max_entropy_change = report.max_entropy_change.max(h1 - h0);
        if h1 > h0 + ENTROPY_TOLERANCE {
            report.monotonicity_violations += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::entropy;

    #[test]
    fn reference_matches_estimator() {
        let q = Quantizer::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..100);
            let v = random_batch(&mut rng, n, &q, BatchShape::Random);
            let b = MessageBatch::single_digit(v.clone()).unwrap();
            let a = entropy(&b, &q, DEFAULT_EPSILON).unwrap();
            assert!((a - reference_entropy(&v, &q, DEFAULT_EPSILON)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_trials_is_an_error() {
        assert!(run(0, 1).is_err());
    }

    #[test]
    fn random_trials_pass_and_exercise_transfers() {
        let r = run(300, 42).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.transfers >= 10, "{r:?}");
        assert!(r.max_entropy_change <= ENTROPY_TOLERANCE);
    }

    #[test]
    fn grid_only_batches_never_move() {
        let r = run_with(200, 9, BatchShape::GridOnly).unwrap();
        assert!(r.passed());
        assert_eq!(r.updates, 0);
        assert_eq!(r.transfers, 0);
    }
}
