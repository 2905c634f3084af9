//! The contrastive offline RL agent and its baselines.
//!
//! An encoder maps observations to latents `z`. Action values are exactly
//! linear in the latent, `Q(o, .) = z theta_a`, with no bias. A projection
//! MLP and a classifier `W` (no bias) feed the contrastive loss, whose labels
//! are per-level quantile bins of a pretrained GVF.
//!
//! Every minibatch runs a CQL update of (encoder, theta_a), then recomputes
//! latents with the updated encoder and runs the contrastive update of
//! (encoder, projection, W), then moves the target copy by EMA.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use gsf_tensor::{Graph, Mlp, Optimizer, OptimizerConfig, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::augment;
use crate::datagen::OfflineDataset;
use crate::quantile::{assign_labels, QuantileError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quantile(#[from] QuantileError),
    #[error("label {label} outside 1..={bins}")]
    Label { label: usize, bins: usize },
    #[error("non-finite {loss} loss at step {step}")]
    NonFinite {
        loss: &'static str,
        step: usize,
        /// Parameters before the failing update.
        params: Box<AgentParams>,
    },
    #[error("level {0} is a held-out test level and must not appear in training data")]
    TestLeak(u32),
    #[error("GVF values cover {got} observations, dataset has {expected}")]
    MissingGvf { got: usize, expected: usize },
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, AgentError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// CQL plus the GVF-labelled contrastive loss.
    Gsf,
    /// CQL alone.
    Cql,
    /// Behavioral cloning.
    Bc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gsf => "gsf",
            Method::Cql => "cql",
            Method::Bc => "bc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveLoss {
    /// Softmax classifier over bin labels.
    Cce,
    /// Set-valued InfoNCE over cosine similarities.
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Quantiles estimated from each minibatch, per level.
    Minibatch,
    /// Quantiles estimated once from every transition of a level.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub steps: usize,
    /// Metrics are logged `epochs` times, evenly spaced over `steps`.
    pub epochs: usize,
    pub batch_size: usize,
    /// Levels drawn per minibatch; each contributes `batch_size / levels_per_batch` rows.
    pub levels_per_batch: usize,
    pub learning_rate: f64,
    pub bins: usize,
    pub temperature: f64,
    pub cql_weight: f64,
    pub nce_weight: f64,
    pub ema_rate: f64,
    pub pad: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub projection_hidden: Vec<usize>,
    pub loss: ContrastiveLoss,
    pub labels: LabelMode,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            epochs: 10,
            batch_size: 256,
            levels_per_batch: 8,
            learning_rate: 5e-4,
            bins: 7,
            temperature: 0.5,
            cql_weight: 1.0,
            nce_weight: 1.0,
            ema_rate: 0.005,
            pad: 2,
            latent_dim: 64,
            encoder_hidden: vec![128, 128],
            projection_hidden: vec![64],
            loss: ContrastiveLoss::Cce,
            labels: LabelMode::Minibatch,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::Config(m.into()));
        if self.steps == 0 || self.epochs == 0 || self.epochs > self.steps {
            return bad("need 0 < epochs <= steps");
        }
        if self.batch_size == 0 || self.levels_per_batch == 0 || self.latent_dim == 0 {
            return bad("batch_size, levels_per_batch and latent_dim must be positive");
        }
        if self.bins == 0 {
            return bad("bins must be at least 1");
        }
        if self.batch_size / self.levels_per_batch < self.bins {
            return bad("each level needs at least `bins` rows per minibatch");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.cql_weight >= 0.0 && self.nce_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return bad("ema_rate must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Online and target parameters of the agent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentParams {
    pub encoder: Mlp,
    pub projection: Mlp,
    /// `[latent, actions]`.
    pub action_head: ParamId,
    /// `[latent, bins]`.
    pub classifier: ParamId,
    pub store: ParamStore,
    pub target: ParamStore,
    pub obs_len: usize,
    pub action_count: usize,
}

impl AgentParams {
    pub fn new<R: Rng + ?Sized>(obs_len: usize, action_count: usize, config: &AgentConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut sizes = vec![obs_len];
        sizes.extend(&config.encoder_hidden);
        sizes.push(config.latent_dim);
        let encoder = Mlp::new(&mut store, "encoder", &sizes, rng);
        let mut sizes = vec![config.latent_dim];
        sizes.extend(&config.projection_hidden);
        sizes.push(config.latent_dim);
        let projection = Mlp::new(&mut store, "projection", &sizes, rng);
        let z = config.latent_dim;
        let action_head = store.add(
            "action_head",
            Tensor::randn(&[z, action_count], (1.0 / z as f64).sqrt(), rng),
        );
        let classifier = store.add("classifier", Tensor::randn(&[z, config.bins], (1.0 / z as f64).sqrt(), rng));
        let target = store.clone();
        Self {
            encoder,
            projection,
            action_head,
            classifier,
            store,
            target,
            obs_len,
            action_count,
        }
    }

    /// Ids of the encoder parameters.
    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    /// Latents for a `[rows, obs_len]` input.
    pub fn latent(&self, g: &mut Graph, p: &gsf_tensor::Bound, x: Var) -> gsf_tensor::Result<Var> {
        self.encoder.forward(g, p, x)
    }

    /// `Q = z theta_a`.
    pub fn q_from_latent(&self, g: &mut Graph, p: &gsf_tensor::Bound, z: Var) -> gsf_tensor::Result<Var> {
        g.matmul(z, p.var(self.action_head))
    }

    fn eval_q(&self, store: &ParamStore, x: Tensor) -> gsf_tensor::Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(x);
        let z = self.latent(&mut g, &p, x)?;
        let q = self.q_from_latent(&mut g, &p, z)?;
        Ok(g.value(q).clone())
    }

    /// Online action values, `[rows, actions]`.
    pub fn q_values(&self, x: Tensor) -> gsf_tensor::Result<Tensor> {
        self.eval_q(&self.store, x)
    }

    pub fn target_q_values(&self, x: Tensor) -> gsf_tensor::Result<Tensor> {
        self.eval_q(&self.target, x)
    }

    /// Latent vectors, `[rows, latent]`.
    pub fn latents(&self, x: Tensor) -> gsf_tensor::Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(x);
        let z = self.latent(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    /// Greedy actions, lowest index on ties.
    pub fn greedy(&self, x: Tensor) -> gsf_tensor::Result<Vec<usize>> {
        let q = self.q_values(x)?;
        let (rows, _) = q.dims2()?;
        Ok((0..rows).map(|i| crate::datagen::argmax(q.row(i))).collect())
    }

    /// Online parameters followed by the target copy under `target/` names.
    pub fn write_checkpoint<W: Write>(&self, w: W) -> gsf_tensor::Result<()> {
        let mut all = self.store.clone();
        for (_, name, t) in self.target.iter() {
            all.add(format!("target/{name}"), t.clone());
        }
        all.write_checkpoint(w)
    }

    /// Loads tensors written by [`AgentParams::write_checkpoint`] into a
    /// freshly built network of the same architecture.
    pub fn read_checkpoint<R: Read>(r: R, template: &AgentParams) -> Result<AgentParams> {
        let all = ParamStore::read_checkpoint(r)?;
        let mut out = template.clone();
        let n = template.store.len();
        if all.len() != 2 * n {
            return Err(AgentError::Checkpoint(format!("expected {} tensors, found {}", 2 * n, all.len())));
        }
        for (id, name, t) in all.iter() {
            let (dst, local) = if id.0 < n {
                (&mut out.store, name.to_string())
            } else {
                (&mut out.target, name.trim_start_matches("target/").to_string())
            };
            let slot = dst
                .find(&local)
                .ok_or_else(|| AgentError::Checkpoint(format!("unknown tensor {name}")))?;
            if dst.get(slot).shape() != t.shape() {
                return Err(AgentError::Checkpoint(format!("shape mismatch for {name}")));
            }
            *dst.get_mut(slot) = t.clone();
        }
        Ok(out)
    }
}

/// Fitted-Q inputs for one minibatch.
#[derive(Clone, Debug)]
pub struct QBatch {
    pub actions: Vec<usize>,
    /// `r + gamma (1 - done) max_a' Q_target(o', a')`.
    pub targets: Vec<f64>,
    /// Behavior probabilities `mu(a | o)`, `[rows, actions]`.
    pub behavior: Tensor,
}

/// Mean squared TD error of the logged actions.
pub fn fitted_q_loss(g: &mut Graph, q: Var, actions: &[usize], targets: &[f64]) -> gsf_tensor::Result<Var> {
    let taken = g.gather(q, actions.to_vec())?;
    let y = g.constant(Tensor::vector(targets.to_vec()));
    let diff = g.sub(taken, y)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

/// Terms of the CQL objective.
#[derive(Clone, Copy, Debug)]
pub struct CqlTerms {
    pub total: Var,
    pub td: Var,
    pub regularizer: Var,
}

/// `TD + lambda * mean(LSE_a Q(o, a) - sum_a mu(a|o) Q(o, a))`.
pub fn cql_loss(g: &mut Graph, q: Var, batch: &QBatch, lambda: f64) -> gsf_tensor::Result<CqlTerms> {
    let td = fitted_q_loss(g, q, &batch.actions, &batch.targets)?;
    let lse = g.logsumexp(q, 1)?;
    let mu = g.constant(batch.behavior.clone());
    let weighted = g.mul(q, mu)?;
    let expected = g.sum_axis(weighted, 1)?;
    let gap = g.sub(lse, expected)?;
    let regularizer = g.mean(gap)?;
    let scaled = g.scale(regularizer, lambda)?;
    let total = g.add(td, scaled)?;
    Ok(CqlTerms { total, td, regularizer })
}

fn check_labels(labels: &[usize], bins: usize) -> Result<()> {
    match labels.iter().find(|&&l| l == 0 || l > bins) {
        Some(&label) => Err(AgentError::Label { label, bins }),
        None => Ok(()),
    }
}

/// Mean negative log-softmax of the true bin under logits `h W / tau`.
/// Labels are in `1..=K` with `K` the classifier width.
pub fn nce_loss(g: &mut Graph, h: Var, w: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let bins = g.value(w).shape()[1];
    check_labels(labels, bins)?;
    let logits = g.matmul(h, w)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let log_probs = g.log_softmax(logits, 1)?;
    let picked = g.gather(log_probs, labels.iter().map(|l| l - 1).collect())?;
    let mean = g.mean(picked)?;
    Ok(g.scale(mean, -1.0)?)
}

#[derive(Clone, Copy, Debug)]
pub struct PairwiseOutcome {
    /// `None` when no class had both a positive pair and a negative.
    pub loss: Option<Var>,
    pub classes: usize,
    pub skipped: usize,
}

/// Set-valued InfoNCE over cosine similarities. For every class with at
/// least one positive pair and one negative, the loss is
/// `LSE_{i in P, j in N} cos_ij / tau - LSE_{i != j in P} cos_ij / tau`;
/// classes are averaged and the rest are skipped and counted.
pub fn pairwise_infonce_loss(g: &mut Graph, h: Var, labels: &[usize], tau: f64) -> Result<PairwiseOutcome> {
    let n = labels.len();
    let unit = g.l2_normalize_rows(h)?;
    let sim = g.matmul_t(unit, unit)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut terms = Vec::new();
    let mut skipped = 0;
    for &k in &classes {
        let positives = labels.iter().filter(|&&l| l == k).count();
        if positives < 2 || positives == n {
            skipped += 1;
            continue;
        }
        let mut num = vec![false; n * n];
        let mut den = vec![false; n * n];
        for i in 0..n {
            if labels[i] != k {
                continue;
            }
            for j in 0..n {
                if labels[j] == k && i != j {
                    num[i * n + j] = true;
                } else if labels[j] != k {
                    den[i * n + j] = true;
                }
            }
        }
        let d = g.masked_logsumexp(sim, den)?;
        let p = g.masked_logsumexp(sim, num)?;
        terms.push(g.sub(d, p)?);
    }
    let count = terms.len();
    let loss = match terms.split_first() {
        None => None,
        Some((first, rest)) => {
            let mut acc = *first;
            for t in rest {
                acc = g.add(acc, *t)?;
            }
            Some(g.scale(acc, 1.0 / count as f64)?)
        }
    };
    Ok(PairwiseOutcome {
        loss,
        classes: count,
        skipped,
    })
}

/// Mean cross-entropy of the logged actions under `softmax(z theta_a)`.
pub fn bc_loss(g: &mut Graph, logits: Var, actions: &[usize]) -> gsf_tensor::Result<Var> {
    let log_probs = g.log_softmax(logits, 1)?;
    let picked = g.gather(log_probs, actions.to_vec())?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

/// Per-epoch training metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean CQL loss; the cross-entropy for behavioral cloning.
    pub cql_loss: f64,
    pub nce_loss: f64,
    pub eval_return_train: f64,
    pub eval_return_test: f64,
    /// Entropy (nats) of the contrastive labels seen this epoch.
    pub label_entropy: f64,
    /// Fraction of minibatch labels that differ from full-sample labels.
    pub label_churn: f64,
    /// Pairwise-loss classes skipped for lack of a positive pair.
    pub skipped_classes: usize,
}

pub const METRICS_HEADER: &str = "epoch,cql_loss,nce_loss,eval_return_train,eval_return_test";
pub const LABEL_METRICS_HEADER: &str = "epoch,label_entropy,label_churn,skipped_classes";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.cql_loss, self.nce_loss, self.eval_return_train, self.eval_return_test
        )
    }

    pub fn label_csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.label_entropy, self.label_churn, self.skipped_classes
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn label_metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(LABEL_METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.label_csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: AgentParams,
    pub metrics: Vec<EpochMetrics>,
}

/// Rows of one minibatch, grouped by level.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub rows: Vec<usize>,
    pub levels: Vec<u32>,
}

/// Draws `levels_per_batch` distinct levels and an equal number of
/// transitions (with replacement) from each.
pub fn stratified_batch<R: Rng + ?Sized>(data: &OfflineDataset, levels: &[u32], config: &AgentConfig, rng: &mut R) -> Minibatch {
    let pick = config.levels_per_batch.min(levels.len());
    let per = config.batch_size / pick;
    let chosen = sample(rng, levels.len(), pick);
    let mut rows = Vec::with_capacity(per * pick);
    let mut out_levels = Vec::with_capacity(per * pick);
    for li in chosen.iter() {
        let level = levels[li];
        let idx = data.level_index(level);
        for _ in 0..per {
            rows.push(idx[rng.random_range(0..idx.len())]);
            out_levels.push(level);
        }
    }
    Minibatch { rows, levels: out_levels }
}

fn stack(rows: Vec<f64>, n: usize, width: usize) -> gsf_tensor::Result<Tensor> {
    Tensor::matrix(n, width, rows)
}

/// Fitted-Q inputs for `rows`, bootstrapping from the target network on the
/// (already augmented) next observations.
pub fn build_q_batch(params: &AgentParams, data: &OfflineDataset, rows: &[usize], next: Tensor) -> Result<QBatch> {
    let actions = params.action_count;
    let gamma = data.header.discount;
    let next_q = params.target_q_values(next)?;
    let mut targets = Vec::with_capacity(rows.len());
    let mut behavior = Vec::with_capacity(rows.len() * actions);
    for (k, &i) in rows.iter().enumerate() {
        let t = &data.transitions[i];
        let boot = if t.done {
            0.0
        } else {
            next_q.row(k).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        targets.push(t.reward + gamma * boot);
        behavior.extend((0..actions).map(|a| t.behavior_prob(a, actions)));
    }
    Ok(QBatch {
        actions: rows.iter().map(|&i| data.transitions[i].action as usize).collect(),
        targets,
        behavior: Tensor::matrix(rows.len(), actions, behavior)?,
    })
}

fn finite(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TensorError::NonFinite { op: "loss" }.into())
    }
}

/// Turns a numerical blow-up into an abort carrying the last good parameters.
fn abort(e: AgentError, loss: &'static str, step: usize, before: &AgentParams) -> AgentError {
    match e {
        AgentError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. }) => AgentError::NonFinite {
            loss,
            step,
            params: Box::new(before.clone()),
        },
        e => e,
    }
}

/// Rejects data from held-out levels.
pub fn check_provenance(data: &OfflineDataset) -> Result<()> {
    for level in data.levels() {
        if data.header.test_ids.contains(&level) {
            return Err(AgentError::TestLeak(level));
        }
    }
    Ok(())
}

struct Labeler<'a> {
    values: Option<&'a [f64]>,
    global: Vec<usize>,
}

impl<'a> Labeler<'a> {
    fn new(data: &OfflineDataset, values: Option<&'a [f64]>, bins: usize) -> Result<Self> {
        let global = match values {
            None => Vec::new(),
            Some(v) => {
                let per: Vec<f64> = data.transitions.iter().map(|t| v[t.obs as usize]).collect();
                let lv: Vec<u32> = data.transitions.iter().map(|t| t.level_id).collect();
                assign_labels(&per, &lv, bins)?.labels
            }
        };
        Ok(Self { values, global })
    }

    fn labels(&self, data: &OfflineDataset, batch: &Minibatch, mode: LabelMode, bins: usize) -> Result<(Vec<usize>, f64)> {
        let values = self.values.expect("contrastive step needs GVF values");
        let global: Vec<usize> = batch.rows.iter().map(|&i| self.global[i]).collect();
        match mode {
            LabelMode::Global => Ok((global, 0.0)),
            LabelMode::Minibatch => {
                let v: Vec<f64> = batch
                    .rows
                    .iter()
                    .map(|&i| values[data.transitions[i].obs as usize])
                    .collect();
                let local = assign_labels(&v, &batch.levels, bins)?.labels;
                let churn = local.iter().zip(&global).filter(|(a, b)| a != b).count() as f64 / local.len() as f64;
                Ok((local, churn))
            }
        }
    }
}

fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Default)]
struct Accumulator {
    main: f64,
    nce: f64,
    steps: usize,
    nce_steps: usize,
    churn: f64,
    label_counts: Vec<usize>,
    skipped: usize,
}

/// Trains one agent. `gvf_values` holds one scalar per observation record
/// and is required when the contrastive step runs. `eval` is called once
/// per epoch and returns mean (train, test) returns.
pub fn train_agent(
    method: Method,
    data: &OfflineDataset,
    gvf_values: Option<&[f64]>,
    config: &AgentConfig,
    seed: u64,
    eval: &mut dyn FnMut(&AgentParams) -> (f64, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_provenance(data)?;
    let contrastive = method == Method::Gsf && config.nce_weight > 0.0;
    if contrastive {
        let got = gvf_values.map_or(0, <[f64]>::len);
        if got != data.observations.len() {
            return Err(AgentError::MissingGvf {
                got,
                expected: data.observations.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_len = data.obs_len();
    let actions = data.header.action_count;
    let shape = data.header.obs_shape;
    let mut params = AgentParams::new(obs_len, actions, config, &mut rng);
    let adam = OptimizerConfig::adam(config.learning_rate);
    let mut value_opt: Optimizer = adam.build(&params.store);
    let mut nce_opt: Optimizer = adam.build(&params.store);
    let levels = data.levels();
    let labeler = Labeler::new(data, if contrastive { gvf_values } else { None }, config.bins)?;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut acc = Accumulator {
        label_counts: vec![0; config.bins],
        ..Accumulator::default()
    };
    for step in 0..config.steps {
        let batch = stratified_batch(data, &levels, config, &mut rng);
        let n = batch.rows.len();
        let mut obs = Vec::with_capacity(n * obs_len);
        let mut next = Vec::with_capacity(n * obs_len);
        for &i in &batch.rows {
            let t = &data.transitions[i];
            obs.extend(augment(data.obs(t.obs), shape, config.pad, &mut rng).0);
            if method != Method::Bc {
                next.extend(augment(data.obs(t.next_obs), shape, config.pad, &mut rng).0);
            }
        }
        let obs = stack(obs, n, obs_len)?;
        let logged: Vec<usize> = batch.rows.iter().map(|&i| data.transitions[i].action as usize).collect();

        let before = params.clone();
        let value_loss = if method == Method::Bc { "bc" } else { "cql" };
        let value = (|| -> Result<f64> {
            let mut g = Graph::new();
            let p = params.store.bind(&mut g);
            let x = g.constant(obs.clone());
            let z = params.latent(&mut g, &p, x)?;
            let q = params.q_from_latent(&mut g, &p, z)?;
            let loss = if method == Method::Bc {
                bc_loss(&mut g, q, &logged)?
            } else {
                let qb = build_q_batch(&params, data, &batch.rows, stack(next, n, obs_len)?)?;
                cql_loss(&mut g, q, &qb, config.cql_weight)?.total
            };
            let value = finite(g.value(loss).item())?;
            let mut grads = g.backward(loss)?;
            value_opt.step(&mut params.store, &p.collect(&mut grads));
            Ok(value)
        })()
        .map_err(|e| abort(e, value_loss, step, &before))?;
        acc.main += value;
        acc.steps += 1;

        if contrastive {
            let (labels, churn) = labeler.labels(data, &batch, config.labels, config.bins)?;
            acc.churn += churn;
            for &l in &labels {
                acc.label_counts[l - 1] += 1;
            }
            let value = (|| -> Result<Option<f64>> {
                let mut g = Graph::new();
                let p = params.store.bind(&mut g);
                let x = g.constant(obs);
                let z = params.latent(&mut g, &p, x)?;
                let h = params.projection.forward(&mut g, &p, z)?;
                let loss = match config.loss {
                    ContrastiveLoss::Cce => Some(nce_loss(&mut g, h, p.var(params.classifier), &labels, config.temperature)?),
                    ContrastiveLoss::Pairwise => {
                        let out = pairwise_infonce_loss(&mut g, h, &labels, config.temperature)?;
                        acc.skipped += out.skipped;
                        out.loss
                    }
                };
                let Some(loss) = loss else { return Ok(None) };
                let value = finite(g.value(loss).item())?;
                let weighted = g.scale(loss, config.nce_weight)?;
                let mut grads = g.backward(weighted)?;
                nce_opt.step(&mut params.store, &p.collect(&mut grads));
                Ok(Some(value))
            })()
            .map_err(|e| abort(e, "nce", step, &before))?;
            if let Some(value) = value {
                acc.nce += value;
                acc.nce_steps += 1;
            }
        }
        let AgentParams { store, target, .. } = &mut params;
        target.ema_from(store, config.ema_rate)?;

        if (step + 1) * config.epochs / config.steps > metrics.len() {
            let (train_ret, test_ret) = eval(&params);
            metrics.push(EpochMetrics {
                epoch: metrics.len() + 1,
                cql_loss: acc.main / acc.steps as f64,
                nce_loss: if acc.nce_steps > 0 { acc.nce / acc.nce_steps as f64 } else { 0.0 },
                eval_return_train: train_ret,
                eval_return_test: test_ret,
                label_entropy: entropy(&acc.label_counts),
                label_churn: if contrastive { acc.churn / acc.steps as f64 } else { 0.0 },
                skipped_classes: acc.skipped,
            });
            acc = Accumulator {
                label_counts: vec![0; config.bins],
                ..Accumulator::default()
            };
        }
    }
    Ok(TrainOutcome { params, metrics })
}

/// GSF training: CQL plus the contrastive loss.
pub fn train_gsf(
    data: &OfflineDataset,
    gvf_values: &[f64],
    config: &AgentConfig,
    seed: u64,
    eval: &mut dyn FnMut(&AgentParams) -> (f64, f64),
) -> Result<TrainOutcome> {
    train_agent(Method::Gsf, data, Some(gvf_values), config, seed, eval)
}

/// Behavioral cloning on the logged actions.
pub fn train_bc(data: &OfflineDataset, config: &AgentConfig, seed: u64, eval: &mut dyn FnMut(&AgentParams) -> (f64, f64)) -> Result<TrainOutcome> {
    train_agent(Method::Bc, data, None, config, seed, eval)
}

/// Number of rows per level in a minibatch, for diagnostics.
pub fn level_histogram(batch: &Minibatch) -> BTreeMap<u32, usize> {
    let mut h = BTreeMap::new();
    for &l in &batch.levels {
        *h.entry(l).or_insert(0) += 1;
    }
    h
}

/// Gradient checks of the agent losses on one random instance each.
pub fn check_losses<R: Rng + ?Sized>(rng: &mut R, h: f64, tol: f64) -> Result<Vec<gsf_tensor::gradcheck::OpCheck>> {
    use gsf_tensor::gradcheck::{away_from_zero, gradient_check, OpCheck};
    let rows = rng.random_range(3..9);
    let actions = rng.random_range(2..6);
    let dim = rng.random_range(2..6);
    let bins = rng.random_range(2..5);
    let taken: Vec<usize> = (0..rows).map(|_| rng.random_range(0..actions)).collect();
    let mut mu: Vec<f64> = (0..rows * actions).map(|_| rng.random_range(0.05..1.0)).collect();
    for r in mu.chunks_mut(actions) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    let batch = QBatch {
        actions: taken.clone(),
        targets: (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect(),
        behavior: Tensor::matrix(rows, actions, mu)?,
    };
    let lambda = rng.random_range(0.1..2.0);
    let tau = rng.random_range(0.2..1.5);
    // rows 0 and 1 form a positive pair and row 2 a negative
    let labels: Vec<usize> = (0..rows)
        .map(|i| match i {
            0 | 1 => 1,
            2 => 2,
            _ => rng.random_range(1..=bins),
        })
        .collect();
    let q = away_from_zero(rng, rows, actions);
    let hm = away_from_zero(rng, rows, dim);
    let w = away_from_zero(rng, dim, bins);
    let mut out = Vec::new();
    let report = gradient_check(
        |g: &mut Graph, v: &[Var]| Ok(cql_loss(g, v[0], &batch, lambda)?.total),
        &[q.clone()],
        h,
        tol,
    )?;
    out.push(OpCheck { op: "cql_loss", report });
    let report = gradient_check(
        |g: &mut Graph, v: &[Var]| {
            Ok(nce_loss(g, v[0], v[1], &labels, tau).expect("labels lie in 1..=bins"))
        },
        &[hm.clone(), w],
        h,
        tol,
    )?;
    out.push(OpCheck { op: "nce_loss", report });
    let report = gradient_check(
        |g: &mut Graph, v: &[Var]| {
            let o = pairwise_infonce_loss(g, v[0], &labels, tau).expect("labels lie in 1..=bins");
            Ok(o.loss.expect("class 1 has a positive pair"))
        },
        &[hm],
        h,
        tol,
    )?;
    out.push(OpCheck {
        op: "pairwise_infonce_loss",
        report,
    });
    let report = gradient_check(|g: &mut Graph, v: &[Var]| bc_loss(g, v[0], &taken), &[q], h, tol)?;
    out.push(OpCheck { op: "bc_loss", report });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> AgentConfig {
        AgentConfig {
            latent_dim: 6,
            encoder_hidden: vec![8],
            projection_hidden: vec![5],
            bins: 3,
            ..AgentConfig::default()
        }
    }

    #[test]
    fn zeroed_classifier_gives_log_k() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = g.leaf(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let w = g.leaf(Tensor::zeros(&[4, 7]));
        let loss = nce_loss(&mut g, h, w, &[1, 7, 3, 3, 2], 0.5).unwrap();
        assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);
        assert!((7f64.ln() - 1.945910).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::zeros(&[2, 3]));
        let w = g.leaf(Tensor::zeros(&[3, 4]));
        assert!(matches!(nce_loss(&mut g, h, w, &[0, 1], 1.0), Err(AgentError::Label { .. })));
        assert!(matches!(nce_loss(&mut g, h, w, &[5, 1], 1.0), Err(AgentError::Label { .. })));
    }

    #[test]
    fn single_action_regularizer_vanishes() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::matrix(3, 1, vec![0.5, -2.0, 7.0]).unwrap());
        let batch = QBatch {
            actions: vec![0, 0, 0],
            targets: vec![0.0; 3],
            behavior: Tensor::filled(&[3, 1], 1.0),
        };
        let terms = cql_loss(&mut g, q, &batch, 1.0).unwrap();
        assert!(g.value(terms.regularizer).item().abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_pairwise_value() {
        // cos = 1 everywhere: loss_k = ln(|P||N|) - ln(|P|(|P|-1)) = ln(|N| / (|P|-1)).
        let mut g = Graph::new();
        let h = g.leaf(Tensor::filled(&[5, 3], 0.7));
        let labels = [1, 1, 1, 2, 2];
        let out = pairwise_infonce_loss(&mut g, h, &labels, 0.5).unwrap();
        let expect = ((2.0f64 / 2.0).ln() + (3.0f64 / 1.0).ln()) / 2.0;
        assert!((g.value(out.loss.unwrap()).item() - expect).abs() < 1e-12);
        assert_eq!((out.classes, out.skipped), (2, 0));
    }

    #[test]
    fn pairwise_without_positive_pairs_is_skipped() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::filled(&[3, 2], 1.0));
        let out = pairwise_infonce_loss(&mut g, h, &[1, 2, 3], 1.0).unwrap();
        assert!(out.loss.is_none());
        assert_eq!(out.skipped, 3);
    }

    #[test]
    fn bc_zero_head_gives_log_actions() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[4, 4]));
        let loss = bc_loss(&mut g, logits, &[0, 1, 2, 3]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn q_ignores_projection_and_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = AgentParams::new(10, 4, &small_config(), &mut rng);
        let x = Tensor::randn(&[3, 10], 1.0, &mut rng);
        let before = params.q_values(x.clone()).unwrap();
        let z = params.latents(x.clone()).unwrap();
        let theta = params.store.get(params.action_head).clone();
        for i in 0..3 {
            for a in 0..4 {
                let lin: f64 = (0..6).map(|k| z.at2(i, k) * theta.at2(k, a)).sum();
                assert!((before.at2(i, a) - lin).abs() < 1e-12);
            }
        }
        for id in params.projection.param_ids().into_iter().chain([params.classifier]) {
            params.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        assert_eq!(params.q_values(x).unwrap(), before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = AgentParams::new(10, 4, &small_config(), &mut rng);
        let mut b = AgentParams::new(10, 4, &small_config(), &mut rng);
        b.target.tensors_mut()[0].data_mut()[0] = 42.0;
        let mut buf = Vec::new();
        b.write_checkpoint(&mut buf).unwrap();
        let back = AgentParams::read_checkpoint(buf.as_slice(), &a).unwrap();
        assert_eq!(back.store, b.store);
        assert_eq!(back.target, b.target);
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            for c in check_losses(&mut rng, 1e-5, 1e-4).unwrap() {
                assert!(c.report.passed, "{}: {:?}", c.op, c.report);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig::default().validate().is_ok());
        let c = AgentConfig {
            batch_size: 40,
            ..AgentConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
