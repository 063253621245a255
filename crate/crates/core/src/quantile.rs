//! Empirical quantile estimator shared by the quantile-mapping baselines and
//! the QQ / box-plot diagnostics.
//!
//! Sorted samples `x_(1) <= ... <= x_(n)` sit at plotting positions
//! `p_j = (j - 0.5) / n`; the quantile function interpolates linearly between
//! them and is clamped to `x_(1)` / `x_(n)` outside `[p_1, p_n]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalQuantiles {
    sorted: Vec<f64>,
}

impl EmpiricalQuantiles {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite sample".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.sorted.len() - 1]
    }

    pub fn quantile(&self, tau: f64) -> f64 {
        let n = self.sorted.len();
        let pos = tau * n as f64 - 0.5;
        if pos <= 0.0 {
            return self.sorted[0];
        }
        if pos >= (n - 1) as f64 {
            return self.sorted[n - 1];
        }
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let (a, b) = (self.sorted[lo], self.sorted[lo + 1]);
        if frac == 0.0 {
            a
        } else {
            a + frac * (b - a)
        }
    }

    /// Values at the probabilities of [`probability_grid`].
    pub fn table(&self, n: usize) -> QuantileTable {
        let probs = probability_grid(n);
        let values = probs.iter().map(|&p| self.quantile(p)).collect();
        QuantileTable { probs, values }
    }
}

/// `n` equally spaced probabilities `(j - 0.5) / n`, `j = 1..=n`.
pub fn probability_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|j| (j as f64 - 0.5) / n as f64).collect()
}

/// Piecewise-linear quantile function sampled on a probability grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTable {
    probs: Vec<f64>,
    values: Vec<f64>,
}

impl QuantileTable {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn first(&self) -> (f64, f64) {
        (self.probs[0], self.values[0])
    }

    pub fn last(&self) -> (f64, f64) {
        let n = self.probs.len() - 1;
        (self.probs[n], self.values[n])
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.values[0] && v <= self.values[self.values.len() - 1]
    }

    /// Inverse quantile at `tau`, clamped to the table's probability range.
    pub fn quantile(&self, tau: f64) -> f64 {
        let n = self.probs.len();
        if tau <= self.probs[0] {
            return self.values[0];
        }
        if tau >= self.probs[n - 1] {
            return self.values[n - 1];
        }
        let hi = self.probs.partition_point(|&p| p <= tau);
        let lo = hi - 1;
        let frac = (tau - self.probs[lo]) / (self.probs[hi] - self.probs[lo]);
        let (a, b) = (self.values[lo], self.values[hi]);
        if frac == 0.0 {
            a
        } else {
            a + frac * (b - a)
        }
    }

    /// Non-exceedance probability of `v`, clamped to the table's probability
    /// range. Values tied with several table entries get the mean of their
    /// probabilities, which keeps the map nondecreasing.
    pub fn cdf(&self, v: f64) -> f64 {
        let n = self.values.len();
        if v > self.values[n - 1] {
            return self.probs[n - 1];
        }
        if v < self.values[0] {
            return self.probs[0];
        }
        let below = self.values.partition_point(|&x| x < v);
        let upto = self.values.partition_point(|&x| x <= v);
        if upto > below {
            let tied = &self.probs[below..upto];
            return tied.iter().sum::<f64>() / tied.len() as f64;
        }
        // Strictly between values[below - 1] and values[below].
        let (lo, hi) = (below - 1, below);
        let frac = (v - self.values[lo]) / (self.values[hi] - self.values[lo]);
        self.probs[lo] + frac * (self.probs[hi] - self.probs[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plotting_position_quantiles() {
        let q = EmpiricalQuantiles::new(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(q.quantile(0.125), 1.0);
        assert_eq!(q.quantile(0.375), 2.0);
        assert_eq!(q.quantile(0.5), 2.5);
        assert_eq!(q.quantile(0.0), 1.0);
        assert_eq!(q.quantile(1.0), 4.0);
    }

    #[test]
    fn cdf_inverts_quantile_between_knots() {
        let q = EmpiricalQuantiles::new(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = q.table(4);
        assert!((t.cdf(2.5) - 0.5).abs() < 1e-15);
        for tau in [0.2, 0.4, 0.61, 0.8] {
            assert!((t.cdf(t.quantile(tau)) - tau).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_take_mean_probability() {
        let q = EmpiricalQuantiles::new(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        let t = q.table(4);
        assert!((t.cdf(0.0) - 0.375).abs() < 1e-15);
        assert!(t.cdf(0.5) > t.cdf(0.0));
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(EmpiricalQuantiles::new(&[]), Err(Error::EmptyInput)));
    }
}
