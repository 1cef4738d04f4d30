//! Uniform quantizer over the message range `[-1, 1]`.
//!
//! The range is cut into `K + 1` bins with `K = 2 / delta`. Bin `k` is the
//! half-open interval `[(k - 0.5)·delta - 1, (k + 0.5)·delta - 1)` and is
//! represented by its grid value `k·delta - 1`. The top endpoint `x = 1`
//! falls in bin `K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantizerRepr", into = "QuantizerRepr")]
pub struct Quantizer {
    delta: f64,
    k_max: usize,
}

#[derive(Serialize, Deserialize)]
struct QuantizerRepr {
    delta: f64,
}

impl TryFrom<QuantizerRepr> for Quantizer {
    type Error = Error;

    fn try_from(repr: QuantizerRepr) -> Result<Self> {
        Quantizer::new(repr.delta)
    }
}

impl From<Quantizer> for QuantizerRepr {
    fn from(q: Quantizer) -> Self {
        QuantizerRepr { delta: q.delta }
    }
}

impl Default for Quantizer {
    fn default() -> Self {
        Quantizer::new(DEFAULT_DELTA).expect("default delta is valid")
    }
}

impl Quantizer {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0 && delta <= 2.0) {
            return Err(Error::InvalidDelta(delta));
        }
        let k = (2.0 / delta).round();
        if (k * delta - 2.0).abs() > 1e-12 {
            return Err(Error::InvalidDelta(delta));
        }
        Ok(Quantizer {
            delta,
            k_max: k as usize,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `K = 2 / delta`, the largest bin index.
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn num_bins(&self) -> usize {
        self.k_max + 1
    }

    /// Grid value `k·delta - 1` of bin `k`.
    #[inline]
    pub fn grid(&self, k: usize) -> f64 {
        k as f64 * self.delta - 1.0
    }

    #[inline]
    fn lower_edge(&self, k: usize) -> f64 {
        (k as f64 - 0.5) * self.delta - 1.0
    }

    #[inline]
    fn upper_edge(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.delta - 1.0
    }

    #[inline]
    fn check_range(x: f64) -> Result<()> {
        if (-1.0..=1.0).contains(&x) {
            Ok(())
        } else {
            Err(Error::OutOfRange { value: x })
        }
    }

    /// Index of the unique bin containing `x`.
    pub fn bin_index(&self, x: f64) -> Result<usize> {
        Self::check_range(x)?;
        let mut k = (((x + 1.0) / self.delta).round() as usize).min(self.k_max);
        // Rounding mode decides nothing: edges are settled by comparison.
        if k > 0 && x < self.lower_edge(k) {
            k -= 1;
        } else if k < self.k_max && x >= self.upper_edge(k) {
            k += 1;
        }
        Ok(k)
    }

    pub fn quantize(&self, x: f64) -> Result<f64> {
        self.bin_index(x).map(|k| self.grid(k))
    }

    pub fn is_grid_point(&self, x: f64) -> bool {
        match self.bin_index(x) {
            Ok(k) => x == self.grid(k),
            Err(_) => false,
        }
    }

    /// The `u` with `x` strictly between grid points `u` and `u + 1`, or
    /// `None` when `x` sits on a grid point.
    pub fn enclosing_cell(&self, x: f64) -> Result<Option<usize>> {
        Self::check_range(x)?;
        if self.k_max == 0 {
            return Ok(None);
        }
        let mut u = (((x + 1.0) / self.delta).floor() as usize).min(self.k_max - 1);
        if x < self.grid(u) {
            u -= 1;
        } else if x > self.grid(u + 1) {
            u += 1;
        }
        if x == self.grid(u) || x == self.grid(u + 1) {
            Ok(None)
        } else {
            Ok(Some(u))
        }
    }

    /// Sign weight `s_k(x)`: `+1` when `x` lies strictly between grid points
    /// `k - 1` and `k`, `-1` when strictly between `k` and `k + 1`, else `0`.
    pub fn sign_weight(&self, x: f64, k: usize) -> Result<i8> {
        Self::check_range(x)?;
        if k > self.k_max {
            return Err(Error::BinOutOfRange { k, max: self.k_max });
        }
        let g = self.grid(k);
        if k > 0 && x > self.grid(k - 1) && x < g {
            Ok(1)
        } else if k < self.k_max && x > g && x < self.grid(k + 1) {
            Ok(-1)
        } else {
            Ok(0)
        }
    }
}
