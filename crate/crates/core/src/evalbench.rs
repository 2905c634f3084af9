//! Zero-shot evaluation: greedy rollouts on train and test levels, and
//! baseline-normalized comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use gsf_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentParams;
use crate::env::{EnvError, Family, LatentMdp};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no levels to evaluate")]
    NoLevels,
    #[error("episodes per level must be at least 1")]
    NoEpisodes,
    #[error("unknown level {0}")]
    UnknownLevel(u32),
    #[error("baseline method `{0}` has no results")]
    MissingBaseline(String),
    #[error("policy failed: {0}")]
    Policy(String),
    #[error("eval CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Chooses actions for a batch of simultaneous rollouts.
pub trait Policy {
    /// `obs` is `[rows, obs_len]`; `cells` are the latent agent cells, which
    /// only privileged reference policies may read.
    fn actions(&self, obs: Tensor, cells: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>>;
}

impl Policy for AgentParams {
    fn actions(&self, obs: Tensor, _cells: &[usize], _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        self.greedy(obs).map_err(|e| EvalError::Policy(e.to_string()))
    }
}

/// Moves along a shortest path to the goal.
#[derive(Clone, Debug)]
pub struct OraclePolicy {
    mdp: LatentMdp,
    distances: Vec<Option<usize>>,
}

impl OraclePolicy {
    pub fn new(mdp: &LatentMdp) -> Self {
        Self {
            mdp: mdp.clone(),
            distances: mdp.goal_distances(),
        }
    }

    fn best(&self, cell: usize) -> usize {
        (0..self.mdp.action_count)
            .min_by_key(|&a| {
                let next = self.mdp.step(cell, a).map(|o| o.next).unwrap_or(cell);
                self.distances[next].unwrap_or(usize::MAX)
            })
            .unwrap_or(0)
    }
}

impl Policy for OraclePolicy {
    fn actions(&self, _obs: Tensor, cells: &[usize], _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok(cells.iter().map(|&c| self.best(c)).collect())
    }
}

/// Uniformly random actions.
#[derive(Clone, Copy, Debug)]
pub struct RandomPolicy {
    pub action_count: usize,
}

impl Policy for RandomPolicy {
    fn actions(&self, _obs: Tensor, cells: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok(cells.iter().map(|_| rng.random_range(0..self.action_count)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReturn {
    pub split: Split,
    pub level_id: u32,
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: String,
    pub seed: u64,
    pub episodes: usize,
    pub levels: Vec<LevelReturn>,
}

pub const EVAL_HEADER: &str = "method,seed,split,level_id,mean_return";

impl EvalResult {
    pub fn returns(&self, split: Split) -> Vec<f64> {
        self.levels.iter().filter(|l| l.split == split).map(|l| l.mean_return).collect()
    }

    /// Mean over levels of the split; NaN when the split is empty.
    pub fn mean(&self, split: Split) -> f64 {
        let r = self.returns(split);
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn median(&self, split: Split) -> f64 {
        median(&self.returns(split)).unwrap_or(f64::NAN)
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for l in &self.levels {
            let _ = writeln!(s, "{},{},{},{},{}", self.method, self.seed, l.split.name(), l.level_id, l.mean_return);
        }
        s
    }
}

pub fn eval_csv(results: &[EvalResult]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in results {
        s.push_str(&r.csv_rows());
    }
    s
}

/// Parses rows written by [`eval_csv`] back into per-(method, seed) results.
/// The episode count is not stored and reads back as 0.
pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalResult>> {
    let mut out: BTreeMap<(String, u64), EvalResult> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == EVAL_HEADER) {
            continue;
        }
        let bad = |message: &str| EvalError::Csv {
            line: i + 1,
            message: message.into(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let seed = f[1].parse().map_err(|_| bad("bad seed"))?;
        let split = match f[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad("split must be train or test")),
        };
        let level_id = f[3].parse().map_err(|_| bad("bad level_id"))?;
        let mean_return = f[4].parse().map_err(|_| bad("bad mean_return"))?;
        out.entry((f[0].to_string(), seed))
            .or_insert_with(|| EvalResult {
                method: f[0].to_string(),
                seed,
                episodes: 0,
                levels: Vec::new(),
            })
            .levels
            .push(LevelReturn {
                split,
                level_id,
                mean_return,
            });
    }
    Ok(out.into_values().collect())
}

/// Undiscounted mean return per level. Episode `e` starts from start cell
/// `e mod |starts|`; rollouts run in lockstep and stop at the goal or the
/// episode cap.
pub fn evaluate(policy: &dyn Policy, family: &Family, levels: &[u32], episodes: usize, seed: u64) -> Result<Vec<LevelReturn>> {
    if levels.is_empty() {
        return Err(EvalError::NoLevels);
    }
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let mdp = &family.mdp;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Rollout {
        slot: usize,
        cell: usize,
        ret: f64,
    }
    let specs: Vec<_> = levels
        .iter()
        .map(|&id| family.level(id).ok_or(EvalError::UnknownLevel(id)))
        .collect::<Result<_>>()?;
    let mut totals = vec![0.0; levels.len()];
    let mut active: Vec<Rollout> = Vec::with_capacity(levels.len() * episodes);
    for slot in 0..levels.len() {
        for e in 0..episodes {
            active.push(Rollout {
                slot,
                cell: mdp.start_cells[e % mdp.start_cells.len()],
                ret: 0.0,
            });
        }
    }
    let obs_len = family.obs_len();
    for _ in 0..mdp.episode_cap {
        if active.is_empty() {
            break;
        }
        let mut obs = Vec::with_capacity(active.len() * obs_len);
        for r in &active {
            obs.extend_from_slice(family.observe(specs[r.slot], r.cell).data());
        }
        let cells: Vec<usize> = active.iter().map(|r| r.cell).collect();
        let x = Tensor::matrix(active.len(), obs_len, obs).map_err(|e| EvalError::Policy(e.to_string()))?;
        let actions = policy.actions(x, &cells, &mut rng)?;
        let mut still = Vec::with_capacity(active.len());
        for (mut r, a) in active.into_iter().zip(actions) {
            let out = mdp.step(r.cell, a)?;
            r.ret += out.reward;
            r.cell = out.next;
            if out.done {
                totals[r.slot] += r.ret;
            } else {
                still.push(r);
            }
        }
        active = still;
    }
    for r in active {
        totals[r.slot] += r.ret;
    }
    let test: BTreeSet<u32> = family.test_ids().into_iter().collect();
    Ok(levels
        .iter()
        .zip(totals)
        .map(|(&level_id, total)| LevelReturn {
            split: if test.contains(&level_id) { Split::Test } else { Split::Train },
            level_id,
            mean_return: total / episodes as f64,
        })
        .collect())
}

/// Evaluates on every train and test level of the family.
pub fn evaluate_all(policy: &dyn Policy, family: &Family, method: &str, seed: u64, episodes: usize) -> Result<EvalResult> {
    let mut ids = family.train_ids();
    ids.extend(family.test_ids());
    Ok(EvalResult {
        method: method.to_string(),
        seed,
        episodes,
        levels: evaluate(policy, family, &ids, episodes, seed)?,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile of a sample (used for summaries only).
fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    /// Score per seed; `None` marks a missing (method, seed) cell.
    pub scores: BTreeMap<u64, Option<f64>>,
    /// Mean test return per seed.
    pub returns: BTreeMap<u64, Option<f64>>,
    pub median: f64,
    pub iqr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    /// Median test return of the baseline.
    pub baseline_median: f64,
    /// False when the baseline median is 0 and raw returns are reported.
    pub normalized: bool,
    pub warning: Option<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

/// Scores every (method, seed) by its mean test return divided by the
/// baseline's median over seeds, minus one.
pub fn compare(results: &[EvalResult], baseline: &str) -> Result<Comparison> {
    let base: Vec<f64> = results
        .iter()
        .filter(|r| r.method == baseline)
        .map(|r| r.mean(Split::Test))
        .collect();
    let baseline_median = median(&base).ok_or_else(|| EvalError::MissingBaseline(baseline.to_string()))?;
    let normalized = baseline_median != 0.0;
    let warning = (!normalized).then(|| format!("baseline `{baseline}` has median return 0; reporting unnormalized returns"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let seeds: Vec<u64> = results.iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect();
    let methods: BTreeSet<&str> = results.iter().map(|r| r.method.as_str()).collect();
    let rows = methods
        .into_iter()
        .map(|method| {
            let returns: BTreeMap<u64, Option<f64>> = seeds
                .iter()
                .map(|&s| {
                    let r = results.iter().find(|r| r.method == method && r.seed == s);
                    (s, r.map(|r| r.mean(Split::Test)))
                })
                .collect();
            let scores: BTreeMap<u64, Option<f64>> = returns
                .iter()
                .map(|(&s, r)| (s, r.map(|r| if normalized { r / baseline_median - 1.0 } else { r })))
                .collect();
            let present: Vec<f64> = scores.values().flatten().copied().collect();
            ComparisonRow {
                method: method.to_string(),
                median: median(&present).unwrap_or(f64::NAN),
                iqr: quantile(&present, 0.75).unwrap_or(f64::NAN) - quantile(&present, 0.25).unwrap_or(f64::NAN),
                scores,
                returns,
            }
        })
        .collect();
    Ok(Comparison {
        baseline: baseline.to_string(),
        baseline_median,
        normalized,
        warning,
        seeds,
        rows,
    })
}

pub const COMPARE_HEADER: &str = "method,seed,test_return,score";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl Comparison {
    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// One line per (method, seed); missing cells read `NA`.
    pub fn csv(&self) -> String {
        let mut s = format!("{COMPARE_HEADER}\n");
        for row in &self.rows {
            for seed in &self.seeds {
                let _ = writeln!(s, "{},{},{},{}", row.method, seed, cell(row.returns[seed]), cell(row.scores[seed]));
            }
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let kind = if self.normalized {
            "scores are test return / baseline median - 1"
        } else {
            "scores are raw test returns"
        };
        let _ = writeln!(
            s,
            "baseline {} (median test return {:.4}); {kind}",
            self.baseline, self.baseline_median
        );
        if let Some(w) = &self.warning {
            let _ = writeln!(s, "warning: {w}");
        }
        let _ = write!(s, "{:<10} {:>9} {:>9}", "method", "median", "iqr");
        for seed in &self.seeds {
            let _ = write!(s, " {:>9}", format!("seed{seed}"));
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:<10} {:>9.4} {:>9.4}", row.method, row.median, row.iqr);
            for seed in &self.seeds {
                let v = row.scores[seed].map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                let _ = write!(s, " {v:>9}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(method: &str, seed: u64, test_return: f64) -> EvalResult {
        EvalResult {
            method: method.into(),
            seed,
            episodes: 1,
            levels: vec![
                LevelReturn {
                    split: Split::Train,
                    level_id: 0,
                    mean_return: 1.0,
                },
                LevelReturn {
                    split: Split::Test,
                    level_id: 1,
                    mean_return: test_return,
                },
            ],
        }
    }

    #[test]
    fn self_normalization_is_zero_and_doubling_is_one() {
        let rs = vec![
            result("cql", 0, 0.2),
            result("cql", 1, 0.4),
            result("cql", 2, 0.6),
            result("gsf", 0, 0.8),
            result("gsf", 1, 0.8),
            result("gsf", 2, 0.8),
        ];
        let c = compare(&rs, "cql").unwrap();
        assert!(c.normalized);
        assert!(c.row("cql").unwrap().median.abs() < 1e-12);
        assert!((c.row("gsf").unwrap().median - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_baseline_falls_back_to_raw_returns() {
        let rs = vec![result("cql", 0, 0.0), result("bc", 0, 0.3)];
        let c = compare(&rs, "cql").unwrap();
        assert!(!c.normalized && c.warning.is_some());
        assert_eq!(c.row("bc").unwrap().median, 0.3);
    }

    #[test]
    fn missing_cells_are_marked() {
        let rs = vec![result("cql", 0, 0.5), result("cql", 1, 0.5), result("gsf", 0, 0.5)];
        let c = compare(&rs, "cql").unwrap();
        assert_eq!(c.row("gsf").unwrap().scores[&1], None);
        assert!(c.csv().contains("gsf,1,NA,NA"));
        assert!(c.table().lines().last().unwrap().trim_end().ends_with('-'));
        assert!(matches!(compare(&rs, "bc"), Err(EvalError::MissingBaseline(_))));
    }

    #[test]
    fn ranking_by_median_survives_normalization() {
        let rs = vec![
            result("cql", 0, 0.3),
            result("a", 0, 0.9),
            result("b", 0, 0.1),
            result("c", 0, 0.5),
        ];
        let c = compare(&rs, "cql").unwrap();
        let mut by_score: Vec<_> = c.rows.iter().map(|r| (r.median, r.method.clone())).collect();
        by_score.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut by_return: Vec<_> = rs.iter().map(|r| (r.median(Split::Test), r.method.clone())).collect();
        by_return.sort_by(|x, y| x.0.total_cmp(&y.0));
        let names = |v: Vec<(f64, String)>| v.into_iter().map(|p| p.1).collect::<Vec<_>>();
        assert_eq!(names(by_score), names(by_return));
    }

    #[test]
    fn csv_round_trip() {
        let rs = vec![result("cql", 0, 0.25), result("gsf", 3, 0.5)];
        let text = eval_csv(&rs);
        assert!(text.starts_with(EVAL_HEADER));
        let back = parse_eval_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].levels, rs[1].levels);
        assert!(parse_eval_csv("x,1,test,0").is_err());
    }

    #[test]
    fn interpolated_median() {
        assert_eq!(median(&[3.0, 1.0, 2.0, 4.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
