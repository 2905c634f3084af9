//! Empirical quantiles and per-level quantile-bin labels.
//!
//! The empirical CDF counts strictly smaller samples, `F(g) = #{x < g} / n`.
//! [`EmpiricalQuantile::quantile`] evaluates `inf { g : p <= F(g) }` over the
//! real line clipped to the sample range, which is the order statistic
//! `x_(max(1, ceil(n p)))`.
//!
//! Bin boundaries restrict the same infimum to sample values: `b[k]` is the
//! smallest sample `v` with `#{x < v} * K >= k * n`, or the sample maximum
//! when no sample qualifies. An observation with value `g` gets the largest
//! `k` in `1..=K` with `b[k-1] <= g <= b[k]`, so values sitting exactly on a
//! boundary move to the upper bin.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantileError {
    #[error("empirical quantile of an empty sample")]
    Empty,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("level {level} has {count} samples, fewer than K = {bins}")]
    TooFewSamples { level: u32, count: usize, bins: usize },
    #[error("{values} values but {levels} level ids")]
    LengthMismatch { values: usize, levels: usize },
}

/// Sorted copy of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalQuantile {
    sorted: Vec<f64>,
}

impl EmpiricalQuantile {
    pub fn new(values: &[f64]) -> Result<Self, QuantileError> {
        if values.is_empty() {
            return Err(QuantileError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(QuantileError::NonFinite);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    /// `F(g) = #{x < g} / n`.
    pub fn cdf(&self, g: f64) -> f64 {
        self.sorted.partition_point(|&x| x < g) as f64 / self.len() as f64
    }

    pub fn quantile(&self, p: f64) -> Result<f64, QuantileError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(QuantileError::Probability(p));
        }
        let n = self.len();
        // Smallest 1-based rank j with j >= n p.
        let j = ((p * n as f64).ceil() as usize).clamp(1, n);
        Ok(self.sorted[j - 1])
    }

    /// Boundaries `b[0..=K]` used for labeling.
    pub fn bin_boundaries(&self, bins: usize) -> Result<Vec<f64>, QuantileError> {
        if bins == 0 {
            return Err(QuantileError::ZeroBins);
        }
        let n = self.len();
        let max = self.sorted[n - 1];
        Ok((0..=bins)
            .map(|k| {
                // Smallest index i with i * K >= k * n.
                let i0 = (k * n).div_ceil(bins);
                // First distinct value starting at or after i0; its strict
                // count #{x < v} equals its index.
                let idx = if i0 == 0 {
                    0
                } else {
                    let prev = self.sorted[i0 - 1];
                    self.sorted.partition_point(|&x| x <= prev)
                };
                self.sorted.get(idx).copied().unwrap_or(max)
            })
            .collect())
    }
}

/// Label in `1..=K` for `g`: the largest `k` with `b[k-1] <= g <= b[k]`.
pub fn label_for(boundaries: &[f64], g: f64) -> usize {
    let bins = boundaries.len() - 1;
    boundaries[..bins].iter().filter(|&&b| b <= g).count().clamp(1, bins)
}

/// Quantile-bin labels for a set of observations spread over several levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinLabeling {
    pub bins: usize,
    /// Per-level boundaries `b[0..=K]`.
    pub boundaries: BTreeMap<u32, Vec<f64>>,
    /// One label in `1..=K` per input value, in input order.
    pub labels: Vec<usize>,
}

/// Labels every value against the quantiles of its own level.
pub fn assign_labels(values: &[f64], levels: &[u32], bins: usize) -> Result<BinLabeling, QuantileError> {
    if values.len() != levels.len() {
        return Err(QuantileError::LengthMismatch {
            values: values.len(),
            levels: levels.len(),
        });
    }
    if bins == 0 {
        return Err(QuantileError::ZeroBins);
    }
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (&v, &l) in values.iter().zip(levels) {
        groups.entry(l).or_default().push(v);
    }
    let mut boundaries = BTreeMap::new();
    for (&level, sample) in &groups {
        if sample.len() < bins {
            return Err(QuantileError::TooFewSamples {
                level,
                count: sample.len(),
                bins,
            });
        }
        boundaries.insert(level, EmpiricalQuantile::new(sample)?.bin_boundaries(bins)?);
    }
    let labels = values
        .iter()
        .zip(levels)
        .map(|(&v, l)| label_for(&boundaries[l], v))
        .collect();
    Ok(BinLabeling {
        bins,
        boundaries,
        labels,
    })
}

impl BinLabeling {
    /// Number of labels per bin, index 0 holding bin 1.
    pub fn bin_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.bins];
        for &l in &self.labels {
            sizes[l - 1] += 1;
        }
        sizes
    }

    /// Shannon entropy (nats) of the label histogram.
    pub fn entropy(&self) -> f64 {
        let n = self.labels.len() as f64;
        self.bin_sizes()
            .into_iter()
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    /// One JSON object per labeled transition.
    pub fn write_jsonl<W: Write>(&self, mut w: W, transitions: &[usize], levels: &[u32]) -> std::io::Result<()> {
        for ((t, l), label) in transitions.iter().zip(levels).zip(&self.labels) {
            writeln!(w, "{{\"transition\":{t},\"level\":{l},\"label\":{label}}}")?;
        }
        Ok(())
    }
}

/// Dissimilarity of two observations through their GVF values.
pub fn gvf_distance(g1: f64, g2: f64) -> f64 {
    (g1 - g2).abs()
}
