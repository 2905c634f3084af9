//! Monte-Carlo checks of the quantile-bin concentration bound and of the
//! link between successor-feature norms and visitation counts.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::datagen::OfflineDataset;
use crate::quantile::{label_for, EmpiricalQuantile, QuantileError};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Quantile(#[from] QuantileError),
    #[error("statistics: {0}")]
    Stats(String),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// Distribution of synthetic GVF values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueDistribution {
    Uniform { low: f64, high: f64 },
    Gaussian { mean: f64, std: f64 },
    /// Finite mixture of point masses.
    PointMasses { values: Vec<f64>, weights: Vec<f64> },
    /// Uniform on `[0, fraction * K * eps]`: population bins are
    /// `fraction * eps` wide at every grid point.
    BinScaled { fraction: f64 },
}

impl Default for ValueDistribution {
    fn default() -> Self {
        ValueDistribution::Gaussian { mean: 0.0, std: 1.0 }
    }
}

enum Sampler {
    Uniform(Uniform<f64>),
    Gaussian(Normal<f64>),
    Points(Vec<f64>, WeightedIndex<f64>),
}

impl ValueDistribution {
    fn sampler(&self, bins: usize, epsilon: f64) -> Result<Sampler> {
        let bad = |m: &str| TheoryError::Config(m.into());
        Ok(match self {
            ValueDistribution::BinScaled { fraction } => {
                let high = fraction * bins as f64 * epsilon;
                Sampler::Uniform(Uniform::new_inclusive(0.0, high).map_err(|_| bad("bin_scaled needs fraction >= 0"))?)
            }
            ValueDistribution::Uniform { low, high } => {
                Sampler::Uniform(Uniform::new_inclusive(*low, *high).map_err(|_| bad("uniform needs low <= high"))?)
            }
            ValueDistribution::Gaussian { mean, std } => {
                Sampler::Gaussian(Normal::new(*mean, *std).map_err(|_| bad("gaussian needs a finite std >= 0"))?)
            }
            ValueDistribution::PointMasses { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return Err(bad("point masses need one weight per value"));
                }
                let index = WeightedIndex::new(weights).map_err(|_| bad("point mass weights must be positive"))?;
                Sampler::Points(values.clone(), index)
            }
        })
    }
}

impl Sampler {
    fn fill<R: Rng + ?Sized>(&self, out: &mut Vec<f64>, n: usize, rng: &mut R) {
        out.clear();
        match self {
            Sampler::Uniform(d) => out.extend((0..n).map(|_| d.sample(rng))),
            Sampler::Gaussian(d) => out.extend((0..n).map(|_| d.sample(rng))),
            Sampler::Points(v, w) => out.extend((0..n).map(|_| v[w.sample(rng)])),
        }
    }
}

/// Largest gap between adjacent empirical quantiles `F^-1(k/K)`, `k = 0..=K`.
pub fn max_quantile_gap(q: &EmpiricalQuantile, bins: usize) -> f64 {
    let at = |k: usize| q.quantile(k as f64 / bins as f64).expect("probability in [0, 1]");
    (0..bins).map(|k| at(k + 1) - at(k)).fold(0.0, f64::max)
}

/// Monte-Carlo estimate of `P[max adjacent quantile gap > eps]` from `n`
/// samples, with its standard error.
pub fn estimate_p(n: usize, bins: usize, epsilon: f64, dist: &ValueDistribution, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if n < bins || bins == 0 || trials == 0 {
        return Err(TheoryError::Config("need n >= K >= 1 and trials >= 1".into()));
    }
    let sampler = dist.sampler(bins, epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = Vec::with_capacity(n);
    let mut hits = 0usize;
    for _ in 0..trials {
        sampler.fill(&mut buf, n, &mut rng);
        if max_quantile_gap(&EmpiricalQuantile::new(&buf)?, bins) > epsilon {
            hits += 1;
        }
    }
    let p = hits as f64 / trials as f64;
    Ok((p, standard_error(p, trials)))
}

fn standard_error(p: f64, trials: usize) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// `2 exp(-2 n eps^2 / 4)`.
pub fn dkw_term(n: usize, epsilon: f64) -> f64 {
    2.0 * (-2.0 * n as f64 * epsilon * epsilon / 4.0).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundExperiment {
    pub n1: usize,
    pub n2: usize,
    pub bins: usize,
    pub epsilon: f64,
    pub gamma: f64,
    /// Probability that the cumulant gap condition fails for a pair.
    pub delta: f64,
    pub trials: usize,
    pub distribution: ValueDistribution,
    /// GVF offset of a failing pair, in units of `epsilon`.
    pub bad_shift: f64,
    pub seed: u64,
}

impl BoundExperiment {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TheoryError::Config(m.into()));
        if self.bins == 0 || self.n1 < self.bins || self.n2 < self.bins {
            return bad("need n1, n2 >= K >= 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1]");
        }
        if self.trials < 100 {
            return bad("at least 100 trials are required");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub experiment: BoundExperiment,
    /// Per-bin frequency of `sup_{o1, o2 in I(k)} |G1(o1) - G2(o2)| > 3 eps`.
    pub per_bin: Vec<f64>,
    /// Largest per-bin frequency.
    pub violation: f64,
    pub violation_se: f64,
    /// Frequency that some bin violates.
    pub any_bin: f64,
    pub p_hat: f64,
    pub p_hat_se: f64,
    /// DKW term with `min(n1, n2)`.
    pub dkw: f64,
    pub bound: f64,
    /// Same bound with `n1` in the DKW term.
    pub bound_n1: f64,
    /// Fraction of pairs whose cumulant gap condition failed.
    pub bad_pairs: f64,
    pub vacuous: bool,
    /// `violation <= bound + 3 se`; `None` for vacuous points.
    pub pass: Option<bool>,
}

impl BoundReport {
    pub fn tolerance(&self) -> f64 {
        3.0 * (self.violation_se.powi(2) + self.p_hat_se.powi(2)).sqrt()
    }
}

/// Per-bin (min, max) of a sorted sample under its own quantile bins.
fn bin_ranges(sorted: &[f64], bins: usize) -> Result<Vec<Option<(f64, f64)>>> {
    let q = EmpiricalQuantile::new(sorted)?;
    let b = q.bin_boundaries(bins)?;
    let mut ranges: Vec<Option<(f64, f64)>> = vec![None; bins];
    for &v in sorted {
        let r = &mut ranges[label_for(&b, v) - 1];
        *r = Some(match *r {
            None => (v, v),
            Some((lo, hi)) => (lo.min(v), hi.max(v)),
        });
    }
    Ok(ranges)
}

/// Simulates pairs of POMDPs sharing the latent value distribution. In a
/// good pair every per-step cumulant gap lies within `(1 - gamma) eps /
/// gamma`, so GVF values differ by at most `eps`; with probability `delta`
/// the pair is bad and the second POMDP's values are offset by
/// `bad_shift * eps`.
pub fn verify_bound(exp: &BoundExperiment) -> Result<BoundReport> {
    exp.validate()?;
    let sampler = exp.distribution.sampler(exp.bins, exp.epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(exp.seed);
    let cumulant_gap = (1.0 - exp.gamma) * exp.epsilon / exp.gamma;
    let gap = Uniform::new_inclusive(-cumulant_gap, cumulant_gap).map_err(|e| TheoryError::Config(e.to_string()))?;
    let horizon = exp.gamma / (1.0 - exp.gamma);
    let (mut g1, mut g2) = (Vec::with_capacity(exp.n1), Vec::with_capacity(exp.n2));
    let mut per_bin = vec![0usize; exp.bins];
    let (mut any, mut p_hits, mut bad_pairs) = (0usize, 0usize, 0usize);
    for _ in 0..exp.trials {
        let bad = rng.random_bool(exp.delta);
        bad_pairs += usize::from(bad);
        sampler.fill(&mut g1, exp.n1, &mut rng);
        sampler.fill(&mut g2, exp.n2, &mut rng);
        for v in g2.iter_mut() {
            // Constant per-step gap d accumulates to sum_{k>=1} gamma^k d.
            *v += horizon * gap.sample(&mut rng);
            if bad {
                *v += exp.bad_shift * exp.epsilon;
            }
        }
        g1.sort_by(f64::total_cmp);
        g2.sort_by(f64::total_cmp);
        if max_quantile_gap(&EmpiricalQuantile::new(&g1)?, exp.bins) > exp.epsilon {
            p_hits += 1;
        }
        let (r1, r2) = (bin_ranges(&g1, exp.bins)?, bin_ranges(&g2, exp.bins)?);
        let mut violated = false;
        for k in 0..exp.bins {
            if let (Some((lo1, hi1)), Some((lo2, hi2))) = (r1[k], r2[k]) {
                if (hi1 - lo2).max(hi2 - lo1) > 3.0 * exp.epsilon {
                    per_bin[k] += 1;
                    violated = true;
                }
            }
        }
        any += usize::from(violated);
    }
    let t = exp.trials as f64;
    let per_bin: Vec<f64> = per_bin.into_iter().map(|c| c as f64 / t).collect();
    let violation = per_bin.iter().copied().fold(0.0, f64::max);
    let p_hat = p_hits as f64 / t;
    let dkw = dkw_term(exp.n1.min(exp.n2), exp.epsilon);
    let bound = dkw + p_hat + exp.delta;
    let mut report = BoundReport {
        experiment: exp.clone(),
        violation_se: standard_error(violation, exp.trials),
        per_bin,
        violation,
        any_bin: any as f64 / t,
        p_hat,
        p_hat_se: standard_error(p_hat, exp.trials),
        dkw,
        bound,
        bound_n1: dkw_term(exp.n1, exp.epsilon) + p_hat + exp.delta,
        bad_pairs: bad_pairs as f64 / t,
        vacuous: bound >= 1.0,
        pass: None,
    };
    if !report.vacuous {
        report.pass = Some(report.violation <= report.bound + report.tolerance());
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundGrid {
    pub n: Vec<usize>,
    pub bins: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: f64,
    pub trials: usize,
    pub distribution: ValueDistribution,
    pub bad_shift: f64,
}

impl Default for BoundGrid {
    fn default() -> Self {
        Self {
            n: vec![50, 200, 1000],
            bins: vec![2, 7, 20],
            epsilon: vec![0.05, 0.1, 0.3],
            delta: vec![0.0, 0.05],
            gamma: 0.99,
            trials: 10_000,
            distribution: ValueDistribution::BinScaled { fraction: 0.8 },
            bad_shift: 10.0,
        }
    }
}

impl BoundGrid {
    pub fn experiments(&self, seed: u64) -> Vec<BoundExperiment> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &bins in &self.bins {
                for &epsilon in &self.epsilon {
                    for &delta in &self.delta {
                        out.push(BoundExperiment {
                            n1: n,
                            n2: n,
                            bins,
                            epsilon,
                            gamma: self.gamma,
                            delta,
                            trials: self.trials,
                            distribution: self.distribution.clone(),
                            bad_shift: self.bad_shift,
                            seed: seed.wrapping_add(out.len() as u64),
                        });
                    }
                }
            }
        }
        out
    }
}

/// Runs every grid point, in parallel across points.
pub fn run_bound_grid(grid: &BoundGrid, seed: u64) -> Result<Vec<BoundReport>> {
    use rayon::prelude::*;
    grid.experiments(seed).par_iter().map(verify_bound).collect()
}

pub const BOUND_HEADER: &str =
    "n1,n2,bins,epsilon,delta,trials,violation,violation_se,any_bin,p_hat,p_hat_se,dkw,bound,bound_n1,vacuous,pass";

pub fn bound_csv(reports: &[BoundReport]) -> String {
    let mut s = format!("{BOUND_HEADER}\n");
    for r in reports {
        let e = &r.experiment;
        let pass = r.pass.map_or("vacuous", |p| if p { "pass" } else { "fail" });
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.n1,
            e.n2,
            e.bins,
            e.epsilon,
            e.delta,
            e.trials,
            r.violation,
            r.violation_se,
            r.any_bin,
            r.p_hat,
            r.p_hat_se,
            r.dkw,
            r.bound,
            r.bound_n1,
            r.vacuous,
            pass
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub points: usize,
    pub non_vacuous: usize,
    pub failures: usize,
    /// The bound's constant: the proof yields 2 where the main text has C.
    pub constant: f64,
    /// Sample size used in the DKW term.
    pub sample_size_rule: String,
    pub reports: Vec<BoundReport>,
}

pub fn summarize_bounds(reports: Vec<BoundReport>) -> BoundSummary {
    BoundSummary {
        points: reports.len(),
        non_vacuous: reports.iter().filter(|r| !r.vacuous).count(),
        failures: reports.iter().filter(|r| r.pass == Some(false)).count(),
        constant: 2.0,
        sample_size_rule: "min(n1, n2); bound_n1 uses n1".into(),
        reports,
    }
}

/// Ranks with ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation and its one-sided p-value for `rho > 0`
/// (t approximation with `m - 2` degrees of freedom).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let m = x.len();
    if m != y.len() || m < 3 {
        return Err(TheoryError::Stats("spearman needs at least 3 paired values".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (m as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean).powi(2);
        syy += (b - mean).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, 1.0));
    }
    let rho = sxy / (sxx * syy).sqrt();
    let df = (m - 2) as f64;
    if rho >= 1.0 - 1e-15 {
        return Ok((rho, 0.0));
    }
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| TheoryError::Stats(e.to_string()))?;
    Ok((rho, 1.0 - dist.cdf(t)))
}

/// Row-wise 1-norms of `sum_t gamma^t P^t` for a substochastic `P`, by
/// fixed-point iteration of `M <- I + gamma P M`.
pub fn successor_norms(p: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let s = p.len();
    let mut m = vec![vec![0.0; s]; s];
    for i in 0..s {
        m[i][i] = 1.0;
    }
    loop {
        let mut next = vec![vec![0.0; s]; s];
        let mut change: f64 = 0.0;
        for i in 0..s {
            for (k, &pik) in p[i].iter().enumerate() {
                if pik != 0.0 {
                    for j in 0..s {
                        next[i][j] += gamma * pik * m[k][j];
                    }
                }
            }
            next[i][i] += 1.0;
            for j in 0..s {
                change = change.max((next[i][j] - m[i][j]).abs());
            }
        }
        m = next;
        if change < 1e-13 {
            break;
        }
    }
    m.iter().map(|row| row.iter().map(|v| v.abs()).sum()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub gamma: f64,
    pub bins: usize,
    /// Visits per state as the source of a logged transition.
    pub counts: Vec<usize>,
    /// 1-norms of the count-smoothed successor representation.
    pub ssr_norms: Vec<f64>,
    /// 1-norms of the successor representation under the empirical model.
    pub sr_norms: Vec<f64>,
    pub labels: Vec<usize>,
    /// Mean count per bin; `None` for empty bins.
    pub bin_mean_counts: Vec<Option<f64>>,
    pub spearman_rho: f64,
    pub p_value: f64,
    /// States violating `g/(n+1) + 1 + g <= |G| <= g/(n+1) + g^2/(1-g) + 1 + g` on the SR.
    pub sandwich_violations: Vec<usize>,
    /// States violating `1 + g - g/(n+1) <= |G| <= 1 + g - g/(n+1) + g^2/(1-g)` on the smoothed SR.
    pub smoothed_violations: Vec<usize>,
}

impl NormReport {
    pub fn correlation_holds(&self, alpha: f64) -> bool {
        self.spearman_rho > 0.0 && self.p_value < alpha
    }

    pub fn sandwich_holds(&self) -> bool {
        self.sandwich_violations.is_empty()
    }
}

/// Counts, successor norms and quantile labels for a tabular dataset whose
/// observations are one-hot states. States are labelled by the 1-norm of
/// `sum_t gamma^t P~^t` with `P~(s, s') = n(s, s') / (n(s) + 1)`.
pub fn verify_norms(data: &OfflineDataset, gamma: f64, bins: usize) -> Result<NormReport> {
    let states = data.obs_len();
    if states < bins || bins == 0 {
        return Err(TheoryError::Config("need at least K states".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(TheoryError::Config("gamma must lie in (0, 1)".into()));
    }
    let mut counts = vec![0usize; states];
    let mut pairs = vec![vec![0usize; states]; states];
    for t in &data.transitions {
        let (s, s2) = (data.cell(t.obs), data.cell(t.next_obs));
        counts[s] += 1;
        pairs[s][s2] += 1;
    }
    let smoothed: Vec<Vec<f64>> = (0..states)
        .map(|s| pairs[s].iter().map(|&c| c as f64 / (counts[s] + 1) as f64).collect())
        .collect();
    let empirical: Vec<Vec<f64>> = (0..states)
        .map(|s| {
            if counts[s] == 0 {
                // Unvisited states keep themselves.
                (0..states).map(|j| if j == s { 1.0 } else { 0.0 }).collect()
            } else {
                pairs[s].iter().map(|&c| c as f64 / counts[s] as f64).collect()
            }
        })
        .collect();
    let ssr_norms = successor_norms(&smoothed, gamma);
    let sr_norms = successor_norms(&empirical, gamma);
    let q = EmpiricalQuantile::new(&ssr_norms)?;
    let boundaries = q.bin_boundaries(bins)?;
    let labels: Vec<usize> = ssr_norms.iter().map(|&g| label_for(&boundaries, g)).collect();
    let mut sums = vec![(0.0, 0usize); bins];
    for (&l, &c) in labels.iter().zip(&counts) {
        sums[l - 1].0 += c as f64;
        sums[l - 1].1 += 1;
    }
    let bin_mean_counts: Vec<Option<f64>> = sums.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect();
    let (idx, means): (Vec<f64>, Vec<f64>) = bin_mean_counts
        .iter()
        .enumerate()
        .filter_map(|(k, m)| m.map(|m| ((k + 1) as f64, m)))
        .unzip();
    let (spearman_rho, p_value) = if idx.len() >= 3 { spearman(&idx, &means)? } else { (0.0, 1.0) };
    let tail = gamma * gamma / (1.0 - gamma);
    let sandwich_violations = (0..states)
        .filter(|&s| {
            let base = gamma / (counts[s] + 1) as f64 + 1.0 + gamma;
            !(base <= sr_norms[s] && sr_norms[s] <= base + tail)
        })
        .collect();
    let tol = 1e-9;
    let smoothed_violations = (0..states)
        .filter(|&s| {
            let base = 1.0 + gamma - gamma / (counts[s] + 1) as f64;
            !(base - tol <= ssr_norms[s] && ssr_norms[s] <= base + tail + tol)
        })
        .collect();
    Ok(NormReport {
        gamma,
        bins,
        counts,
        ssr_norms,
        sr_norms,
        labels,
        bin_mean_counts,
        spearman_rho,
        p_value,
        sandwich_violations,
        smoothed_violations,
    })
}

/// A continuing random walk on `states` cells stepping right with
/// probability `right` (reflecting at both ends), logged as one episode.
pub fn random_walk_dataset(states: usize, right: f64, steps: usize, gamma: f64, seed: u64) -> OfflineDataset {
    use crate::datagen::{tabular_dataset, LatentTransition};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cell = 0usize;
    let mut ep = Vec::with_capacity(steps);
    for _ in 0..steps {
        let up = rng.random_bool(right);
        let next = if up { (cell + 1).min(states - 1) } else { cell.saturating_sub(1) };
        ep.push(LatentTransition {
            cell,
            action: usize::from(up),
            reward: 0.0,
            next,
            done: false,
        });
        cell = next;
    }
    tabular_dataset(states, 2, gamma, &[ep])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_has_no_gaps() {
        let d = ValueDistribution::PointMasses {
            values: vec![3.0],
            weights: vec![1.0],
        };
        assert_eq!(estimate_p(50, 7, 1e-9, &d, 200, 0).unwrap().0, 0.0);
    }

    #[test]
    fn unit_range_never_exceeds_one() {
        let d = ValueDistribution::Uniform { low: 0.0, high: 1.0 };
        assert_eq!(estimate_p(100, 1, 1.0, &d, 500, 1).unwrap().0, 0.0);
    }

    #[test]
    fn dkw_term_value() {
        assert!((dkw_term(1000, 0.1) - 2.0 * (-5.0f64).exp()).abs() < 1e-15);
        assert!((dkw_term(1000, 0.1) - 0.013476).abs() < 1e-6);
    }

    #[test]
    fn spearman_examples() {
        let (rho, p) = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 9.0, 10.0, 30.0]).unwrap();
        assert_eq!((rho, p), (1.0, 0.0));
        let (rho, _) = spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((rho + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn successor_norms_of_a_stochastic_matrix() {
        let p = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        for v in successor_norms(&p, 0.9) {
            assert!((v - 10.0).abs() < 1e-10);
        }
    }

    #[test]
    fn validation() {
        let mut e = BoundExperiment {
            n1: 10,
            n2: 10,
            bins: 20,
            epsilon: 0.1,
            gamma: 0.99,
            delta: 0.0,
            trials: 100,
            distribution: ValueDistribution::default(),
            bad_shift: 10.0,
            seed: 0,
        };
        assert!(verify_bound(&e).is_err());
        e.bins = 2;
        e.trials = 10;
        assert!(verify_bound(&e).is_err());
    }
}
