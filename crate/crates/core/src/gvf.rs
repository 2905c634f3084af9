//! Cumulants and offline TD estimation of generalized value functions.
//!
//! `G(o_t) = E[sum_{k>=1} gamma^k c(o_{t+k}, a_{t+k})]`, so the TD target of a
//! transition is `gamma * (c(o', a') + G_target(o'))` where `(o', a')` comes
//! from the next logged transition of the same episode. Terminal transitions
//! bootstrap 0; truncated final transitions have no successor and are skipped.
//!
//! Each level gets one output chunk of `d` values. Chunks are trained in
//! PopArt-normalized space with per-level, per-dimension statistics.

use std::collections::BTreeMap;

use gsf_tensor::{Graph, Linear, Mlp, Optimizer, OptimizerConfig, ParamStore, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::augment;
use crate::datagen::OfflineDataset;

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const DIVERGENCE_LOSS: f64 = 1e6;
/// Relative slack on the `c_max / (1 - gamma)` range check.
pub const RANGE_SLACK: f64 = 0.1;

#[derive(Debug, Error)]
pub enum GvfError {
    #[error("level {0} has no usable transitions")]
    EmptyLevel(u32),
    #[error("level {level} diverged at step {step}: loss {loss}")]
    Diverged { level: u32, step: usize, loss: f64 },
    #[error("level {level}: {source}")]
    Tensor {
        level: u32,
        #[source]
        source: TensorError,
    },
    #[error("invalid gvf config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SfProjection {
    /// Fixed Gaussian random projection of the flattened observation.
    Gaussian,
    /// The observation itself; a state indicator for one-hot observations.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CumulantKind {
    Reward,
    SuccessorFeatures { dim: usize, projection: SfProjection },
    ActionIndicator,
}

impl CumulantKind {
    pub fn successor_features() -> Self {
        CumulantKind::SuccessorFeatures {
            dim: 16,
            projection: SfProjection::Gaussian,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CumulantKind::Reward => "reward",
            CumulantKind::SuccessorFeatures { .. } => "sf",
            CumulantKind::ActionIndicator => "action",
        }
    }
}

/// A cumulant bound to an observation size and action count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cumulant {
    pub kind: CumulantKind,
    pub obs_len: usize,
    pub action_count: usize,
    /// `[obs_len, dim]` row-major, only for Gaussian successor features.
    projection: Option<Vec<f64>>,
    /// Largest reduced magnitude seen in the data.
    pub c_max: f64,
}

impl Cumulant {
    pub fn new(kind: CumulantKind, obs_len: usize, action_count: usize, seed: u64) -> Result<Self, GvfError> {
        let projection = match kind {
            CumulantKind::SuccessorFeatures { dim, projection } => {
                if dim == 0 {
                    return Err(GvfError::Config("successor feature dim must be positive".into()));
                }
                match projection {
                    SfProjection::Gaussian => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let scale = 1.0 / (obs_len as f64).sqrt();
                        Some(
                            (0..obs_len * dim)
                                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                                .collect(),
                        )
                    }
                    SfProjection::Identity => {
                        if dim != obs_len {
                            return Err(GvfError::Config(format!(
                                "identity successor features need dim = obs_len ({obs_len}), got {dim}"
                            )));
                        }
                        None
                    }
                }
            }
            _ => None,
        };
        Ok(Self {
            kind,
            obs_len,
            action_count,
            projection,
            c_max: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            CumulantKind::Reward => 1,
            CumulantKind::SuccessorFeatures { dim, .. } => dim,
            CumulantKind::ActionIndicator => self.action_count,
        }
    }

    pub fn eval(&self, obs: &[f64], action: usize, reward: f64) -> Vec<f64> {
        match self.kind {
            CumulantKind::Reward => vec![reward],
            CumulantKind::ActionIndicator => {
                let mut v = vec![0.0; self.action_count];
                v[action] = 1.0;
                v
            }
            CumulantKind::SuccessorFeatures { dim, .. } => match &self.projection {
                None => obs.to_vec(),
                Some(p) => {
                    let mut out = vec![0.0; dim];
                    for (i, &x) in obs.iter().enumerate() {
                        if x != 0.0 {
                            for (o, w) in out.iter_mut().zip(&p[i * dim..(i + 1) * dim]) {
                                *o += x * w;
                            }
                        }
                    }
                    out
                }
            },
        }
    }

    /// Scalar summary of a cumulant or GVF vector: the value itself for
    /// rewards, the 1-norm for successor features, and a dot product with
    /// evenly spaced action weights `a / (|A| - 1)` for action indicators.
    pub fn reduce(&self, v: &[f64]) -> f64 {
        match self.kind {
            CumulantKind::Reward => v[0],
            CumulantKind::SuccessorFeatures { .. } => v.iter().map(|x| x.abs()).sum(),
            CumulantKind::ActionIndicator => {
                let denom = (self.action_count.max(2) - 1) as f64;
                v.iter().enumerate().map(|(a, x)| a as f64 / denom * x).sum()
            }
        }
    }

    /// Sets `c_max` to the largest reduced cumulant magnitude in `data`.
    pub fn estimate_c_max(&mut self, data: &OfflineDataset) {
        let mut best: f64 = 0.0;
        for t in &data.transitions {
            let c = self.eval(data.obs(t.obs), t.action as usize, t.reward);
            best = best.max(self.reduce(&c).abs());
        }
        self.c_max = best.max(f64::MIN_POSITIVE);
    }

    /// Range a reduced GVF value may occupy.
    pub fn value_bound(&self, discount: f64) -> f64 {
        self.c_max / (1.0 - discount) * (1.0 + RANGE_SLACK)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GvfMode {
    /// One encoder shared by every level's output chunk.
    Joint,
    /// A separate network per level, trained concurrently.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GvfConfig {
    pub iterations: usize,
    /// Steps use every usable transition once this reaches their count.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub ema_rate: f64,
    pub popart: bool,
    pub popart_rate: f64,
    pub pad: usize,
    /// Hidden and output widths of the GVF encoder; empty means the trunk
    /// reads the observation directly.
    pub encoder: Vec<usize>,
    /// Bias on the output layer. PopArt needs it to absorb mean shifts.
    pub trunk_bias: bool,
    pub mode: GvfMode,
}

impl Default for GvfConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 256,
            optimizer: OptimizerConfig::adam(3e-4),
            ema_rate: 0.005,
            popart: true,
            popart_rate: 0.01,
            pad: 2,
            encoder: vec![128, 64],
            trunk_bias: true,
            mode: GvfMode::Joint,
        }
    }
}

impl GvfConfig {
    pub fn validate(&self) -> Result<(), GvfError> {
        let bad = |m: &str| Err(GvfError::Config(m.into()));
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be positive");
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return bad("ema_rate must lie in (0, 1]");
        }
        if !(self.popart_rate > 0.0 && self.popart_rate <= 1.0) {
            return bad("popart_rate must lie in (0, 1]");
        }
        if self.popart && !self.trunk_bias {
            return bad("popart needs trunk_bias");
        }
        if self.encoder.contains(&0) {
            return bad("encoder widths must be positive");
        }
        Ok(())
    }
}

/// Streaming target statistics for every output column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopArt {
    pub rate: f64,
    pub mean: Vec<f64>,
    pub second: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Old and new statistics of one column after an update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatChange {
    pub column: usize,
    pub old_mean: f64,
    pub old_sigma: f64,
    pub new_mean: f64,
    pub new_sigma: f64,
}

impl PopArt {
    pub fn new(columns: usize, rate: f64) -> Self {
        Self {
            rate,
            mean: vec![0.0; columns],
            second: vec![1.0; columns],
            sigma: vec![1.0; columns],
        }
    }

    /// Folds a batch of targets for `column` into the statistics. A batch
    /// with zero variance moves the mean but keeps sigma.
    pub fn observe(&mut self, column: usize, targets: &[f64]) -> StatChange {
        let n = targets.len() as f64;
        let m1 = targets.iter().sum::<f64>() / n;
        let m2 = targets.iter().map(|y| y * y).sum::<f64>() / n;
        let batch_var = m2 - m1 * m1;
        let (old_mean, old_sigma) = (self.mean[column], self.sigma[column]);
        let b = self.rate;
        let mean = (1.0 - b) * old_mean + b * m1;
        if targets.len() > 1 && batch_var > 0.0 && targets.iter().any(|&y| y != targets[0]) {
            let second = (1.0 - b) * self.second[column] + b * m2;
            self.second[column] = second;
            self.sigma[column] = (second - mean * mean).max(0.0).sqrt().max(SIGMA_FLOOR);
        } else {
            self.second[column] = old_sigma * old_sigma + mean * mean;
        }
        self.mean[column] = mean;
        StatChange {
            column,
            old_mean,
            old_sigma,
            new_mean: mean,
            new_sigma: self.sigma[column],
        }
    }

    pub fn normalize(&self, column: usize, y: f64) -> f64 {
        (y - self.mean[column]) / self.sigma[column]
    }

    pub fn denormalize(&self, column: usize, n: f64) -> f64 {
        self.sigma[column] * n + self.mean[column]
    }
}

/// Rescales output column `change.column` of a linear layer so that
/// `sigma * (x W + b) + mu` is unchanged by the statistics update.
pub fn preserve_outputs(layer: &Linear, store: &mut ParamStore, change: &StatChange) {
    let ratio = change.old_sigma / change.new_sigma;
    let cols = layer.outputs;
    let w = store.get_mut(layer.weight).data_mut();
    for row in w.chunks_mut(cols) {
        row[change.column] *= ratio;
    }
    if let Some(b) = layer.bias {
        let b = &mut store.get_mut(b).data_mut()[change.column];
        *b = (change.old_sigma * *b + change.old_mean - change.new_mean) / change.new_sigma;
    }
}

/// GVF network for a group of levels: encoder, a trunk with one `dim`-wide
/// chunk per level, a target copy and PopArt statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GvfNet {
    pub levels: Vec<u32>,
    pub dim: usize,
    pub encoder: Option<Mlp>,
    pub trunk: Linear,
    pub params: ParamStore,
    pub target: ParamStore,
    pub popart: PopArt,
}

impl GvfNet {
    pub fn new<R: Rng + ?Sized>(levels: Vec<u32>, obs_len: usize, dim: usize, config: &GvfConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let (encoder, width) = if config.encoder.is_empty() {
            (None, obs_len)
        } else {
            let mut sizes = vec![obs_len];
            sizes.extend(&config.encoder);
            (Some(Mlp::new(&mut params, "gvf.encoder", &sizes, rng)), *sizes.last().unwrap())
        };
        let outputs = dim * levels.len();
        let trunk = Linear::new(&mut params, "gvf.trunk", width, outputs, config.trunk_bias, rng);
        // Start from zero predictions.
        params.get_mut(trunk.weight).data_mut().iter_mut().for_each(|w| *w *= 0.01);
        let target = params.clone();
        Self {
            levels,
            dim,
            encoder,
            trunk,
            params,
            target,
            popart: PopArt::new(outputs, config.popart_rate),
        }
    }

    pub fn head(&self, level: u32) -> Option<usize> {
        self.levels.iter().position(|&l| l == level)
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, frozen: bool, x: Tensor) -> gsf_tensor::Result<(gsf_tensor::Var, gsf_tensor::Bound)> {
        let p = if frozen { store.bind_frozen(g) } else { store.bind(g) };
        let x = g.constant(x);
        let mut h = x;
        if let Some(enc) = &self.encoder {
            h = enc.forward(g, &p, h)?;
            h = g.relu(h)?;
        }
        Ok((self.trunk.forward(g, &p, h)?, p))
    }

    /// Normalized outputs of every chunk, `[rows, dim * levels]`.
    fn raw(&self, store: &ParamStore, x: Tensor) -> gsf_tensor::Result<Tensor> {
        let mut g = Graph::new();
        let (out, _) = self.forward(&mut g, store, true, x)?;
        Ok(g.value(out).clone())
    }

    fn denormalized(&self, store: &ParamStore, rows: &[&[f64]], heads: &[usize]) -> gsf_tensor::Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = stack_rows(rows)?;
        let raw = self.raw(store, x)?;
        Ok(heads
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                (0..self.dim)
                    .map(|d| {
                        let col = h * self.dim + d;
                        self.popart.denormalize(col, raw.at2(i, col))
                    })
                    .collect()
            })
            .collect())
    }

    /// Unnormalized online predictions for observations and their heads.
    pub fn predict(&self, rows: &[&[f64]], heads: &[usize]) -> gsf_tensor::Result<Vec<Vec<f64>>> {
        self.denormalized(&self.params, rows, heads)
    }

    pub fn predict_target(&self, rows: &[&[f64]], heads: &[usize]) -> gsf_tensor::Result<Vec<Vec<f64>>> {
        self.denormalized(&self.target, rows, heads)
    }

    /// Folds batch targets of one column into PopArt and rescales the online
    /// and target output layers to preserve their predictions.
    pub fn popart_update(&mut self, column: usize, targets: &[f64]) -> StatChange {
        let change = self.popart.observe(column, targets);
        preserve_outputs(&self.trunk, &mut self.params, &change);
        preserve_outputs(&self.trunk, &mut self.target, &change);
        change
    }
}

fn stack_rows(rows: &[&[f64]]) -> gsf_tensor::Result<Tensor> {
    let cols = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), cols, data)
}

/// Loss trajectory of one trained network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GvfTrace {
    pub losses: Vec<f64>,
}

/// Trained GVF estimators for a set of levels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GvfModel {
    pub cumulant: Cumulant,
    pub discount: f64,
    pub nets: Vec<GvfNet>,
    pub traces: Vec<GvfTrace>,
}

/// Scalar GVF values with the number of range-check violations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GvfValues {
    /// One value per observation record of the dataset.
    pub values: Vec<f64>,
    pub violations: usize,
    pub bound: f64,
}

impl GvfModel {
    fn locate(&self, level: u32) -> Option<(usize, usize)> {
        self.nets
            .iter()
            .enumerate()
            .find_map(|(n, net)| net.head(level).map(|h| (n, h)))
    }

    /// Unnormalized vector predictions of `level`'s GVF.
    pub fn predict(&self, level: u32, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>, GvfError> {
        let (n, h) = self.locate(level).ok_or(GvfError::EmptyLevel(level))?;
        self.nets[n]
            .predict(rows, &vec![h; rows.len()])
            .map_err(|source| GvfError::Tensor { level, source })
    }

    /// Reduced, range-clipped value for every observation in the dataset.
    pub fn scalar_values(&self, data: &OfflineDataset) -> Result<GvfValues, GvfError> {
        let bound = self.cumulant.value_bound(self.discount);
        let mut values = vec![0.0; data.observations.len()];
        let mut violations = 0;
        let mut by_level: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, o) in data.observations.iter().enumerate() {
            by_level.entry(o.level_id).or_default().push(i);
        }
        for (level, idx) in by_level {
            for chunk in idx.chunks(512) {
                let rows: Vec<&[f64]> = chunk.iter().map(|&i| data.observations[i].data.as_slice()).collect();
                let preds = self.predict(level, &rows)?;
                for (&i, p) in chunk.iter().zip(preds) {
                    let v = self.cumulant.reduce(&p);
                    if v.abs() > bound {
                        violations += 1;
                    }
                    values[i] = v.clamp(-bound, bound);
                }
            }
        }
        Ok(GvfValues {
            values,
            violations,
            bound,
        })
    }
}

/// Transitions of `levels` with a defined TD target.
fn usable(data: &OfflineDataset, levels: &[u32]) -> Vec<usize> {
    levels
        .iter()
        .flat_map(|&l| data.level_index(l).iter().copied())
        .filter(|&i| data.transitions[i].done || data.successor(i).is_some())
        .collect()
}

/// TD targets `gamma * (c' + G_target(o'))`, zero for terminal transitions.
pub fn td_targets(net: &GvfNet, cumulant: &Cumulant, discount: f64, data: &OfflineDataset, batch: &[usize]) -> gsf_tensor::Result<Vec<Vec<f64>>> {
    let dim = net.dim;
    let mut targets = vec![vec![0.0; dim]; batch.len()];
    let mut rows = Vec::new();
    let mut heads = Vec::new();
    let mut slots = Vec::new();
    for (k, &i) in batch.iter().enumerate() {
        let t = &data.transitions[i];
        if t.done {
            continue;
        }
        let j = data.successor(i).expect("usable transition has a successor");
        let next = &data.transitions[j];
        let c = cumulant.eval(data.obs(next.obs), next.action as usize, next.reward);
        targets[k] = c;
        rows.push(data.obs(next.obs));
        heads.push(net.head(t.level_id).expect("level belongs to net"));
        slots.push(k);
    }
    let boot = net.predict_target(&rows, &heads)?;
    for (k, b) in slots.into_iter().zip(boot) {
        for (y, g) in targets[k].iter_mut().zip(b) {
            *y = discount * (*y + g);
        }
    }
    Ok(targets)
}

fn train_net(
    mut net: GvfNet,
    cumulant: &Cumulant,
    discount: f64,
    data: &OfflineDataset,
    config: &GvfConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(GvfNet, GvfTrace), GvfError> {
    let first = net.levels[0];
    let tensor_err = |source| GvfError::Tensor { level: first, source };
    let pool = usable(data, &net.levels);
    for &l in &net.levels {
        if usable(data, &[l]).is_empty() {
            return Err(GvfError::EmptyLevel(l));
        }
    }
    let shape = data.header.obs_shape;
    let mut opt: Optimizer = config.optimizer.build(&net.params);
    let mut trace = GvfTrace::default();
    let full = config.batch_size >= pool.len();
    for step in 0..config.iterations {
        let batch: Vec<usize> = if full {
            pool.clone()
        } else {
            (0..config.batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        let targets = td_targets(&net, cumulant, discount, data, &batch).map_err(tensor_err)?;
        let heads: Vec<usize> = batch
            .iter()
            .map(|&i| net.head(data.transitions[i].level_id).unwrap())
            .collect();
        if config.popart {
            let mut columns: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (y, &h) in targets.iter().zip(&heads) {
                for (d, v) in y.iter().enumerate() {
                    columns.entry(h * net.dim + d).or_default().push(*v);
                }
            }
            for (col, ys) in columns {
                net.popart_update(col, &ys);
            }
        }
        let mut normalized = Vec::with_capacity(batch.len() * net.dim);
        for (y, &h) in targets.iter().zip(&heads) {
            for (d, v) in y.iter().enumerate() {
                normalized.push(net.popart.normalize(h * net.dim + d, *v));
            }
        }
        let mut rows = Vec::with_capacity(batch.len() * data.obs_len());
        for &i in &batch {
            let (o, _) = augment(data.obs(data.transitions[i].obs), shape, config.pad, rng);
            rows.extend(o);
        }
        let x = Tensor::matrix(batch.len(), data.obs_len(), rows).map_err(tensor_err)?;
        let y = Tensor::matrix(batch.len(), net.dim, normalized).map_err(tensor_err)?;
        let mut g = Graph::new();
        let (out, bound) = net.forward(&mut g, &net.params, false, x).map_err(tensor_err)?;
        let loss = (|| {
            let pred = g.gather_blocks(out, heads.clone(), net.dim)?;
            let y = g.constant(y);
            let diff = g.sub(pred, y)?;
            let sq = g.square(diff)?;
            g.mean(sq)
        })()
        .map_err(tensor_err)?;
        let value = g.value(loss).item();
        if !value.is_finite() || value > DIVERGENCE_LOSS {
            return Err(GvfError::Diverged {
                level: first,
                step,
                loss: value,
            });
        }
        let mut grads = g.backward(loss).map_err(tensor_err)?;
        opt.step(&mut net.params, &bound.collect(&mut grads));
        net.target.ema_from(&net.params, config.ema_rate).map_err(tensor_err)?;
        trace.losses.push(value);
    }
    Ok((net, trace))
}

fn net_rng(seed: u64, level: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(level as u64 + 1);
    rng
}

/// Trains GVFs for `levels` according to `config.mode`. Independent mode
/// trains one network per level in parallel; results do not depend on
/// scheduling because every network owns its seed.
pub fn learn_all_gvfs(
    cumulant: &Cumulant,
    data: &OfflineDataset,
    levels: &[u32],
    config: &GvfConfig,
    seed: u64,
) -> Result<GvfModel, GvfError> {
    learn_all_gvfs_with(cumulant, data, levels, config, seed, true)
}

/// Same as [`learn_all_gvfs`], with the thread pool optionally bypassed.
pub fn learn_all_gvfs_with(
    cumulant: &Cumulant,
    data: &OfflineDataset,
    levels: &[u32],
    config: &GvfConfig,
    seed: u64,
    parallel: bool,
) -> Result<GvfModel, GvfError> {
    config.validate()?;
    if levels.is_empty() {
        return Err(GvfError::Config("no levels to train".into()));
    }
    let discount = data.header.discount;
    let groups: Vec<Vec<u32>> = match config.mode {
        GvfMode::Joint => vec![levels.to_vec()],
        GvfMode::Independent => levels.iter().map(|&l| vec![l]).collect(),
    };
    let run = |group: &Vec<u32>| {
        let mut rng = net_rng(seed, group[0]);
        let net = GvfNet::new(group.clone(), data.obs_len(), cumulant.dim(), config, &mut rng);
        train_net(net, cumulant, discount, data, config, &mut rng)
    };
    let results: Vec<Result<(GvfNet, GvfTrace), GvfError>> = if parallel {
        groups.par_iter().map(run).collect()
    } else {
        groups.iter().map(run).collect()
    };
    let mut nets = Vec::new();
    let mut traces = Vec::new();
    for r in results {
        let (n, t) = r?;
        nets.push(n);
        traces.push(t);
    }
    Ok(GvfModel {
        cumulant: cumulant.clone(),
        discount,
        nets,
        traces,
    })
}

/// Single-level estimation.
pub fn learn_gvf(cumulant: &Cumulant, data: &OfflineDataset, level: u32, config: &GvfConfig, seed: u64) -> Result<GvfModel, GvfError> {
    learn_all_gvfs(cumulant, data, &[level], config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulant_examples() {
        let r = Cumulant::new(CumulantKind::Reward, 4, 4, 0).unwrap();
        assert_eq!(r.eval(&[0.0; 4], 1, 1.0), vec![1.0]);
        let a = Cumulant::new(CumulantKind::ActionIndicator, 4, 4, 0).unwrap();
        assert_eq!(a.eval(&[0.0; 4], 2, 0.0), vec![0.0, 0.0, 1.0, 0.0]);
        assert!((a.reduce(&[0.0, 0.0, 1.0, 0.0]) - 2.0 / 3.0).abs() < 1e-15);
        let sf = Cumulant::new(CumulantKind::successor_features(), 10, 4, 3).unwrap();
        let o: Vec<f64> = (0..10).map(|v| v as f64 * 0.1).collect();
        assert_eq!(sf.eval(&o, 0, 0.0), sf.eval(&o, 3, 1.0));
        assert_eq!(sf.eval(&o, 0, 0.0).len(), 16);
        assert_eq!(sf, Cumulant::new(CumulantKind::successor_features(), 10, 4, 3).unwrap());
        let id = Cumulant::new(
            CumulantKind::SuccessorFeatures {
                dim: 3,
                projection: SfProjection::Identity,
            },
            3,
            2,
            0,
        )
        .unwrap();
        assert_eq!(id.eval(&[0.0, 1.0, 0.0], 0, 0.0), vec![0.0, 1.0, 0.0]);
        assert_eq!(id.reduce(&[0.5, -1.0, 0.0]), 1.5);
    }

    #[test]
    fn popart_constant_targets_converge_and_preserve() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = GvfConfig {
            encoder: vec![5],
            popart_rate: 0.2,
            ..GvfConfig::default()
        };
        let mut net = GvfNet::new(vec![0, 1], 6, 2, &config, &mut rng);
        let obs: Vec<Vec<f64>> = (0..4).map(|i| (0..6).map(|j| (i * j) as f64 * 0.1).collect()).collect();
        let rows: Vec<&[f64]> = obs.iter().map(Vec::as_slice).collect();
        let heads = [0, 1, 1, 0];
        let before = net.predict(&rows, &heads).unwrap();
        for _ in 0..200 {
            net.popart_update(1, &[3.5, 3.5, 3.5]);
        }
        assert!((net.popart.mean[1] - 3.5).abs() < 1e-10);
        assert_eq!(net.popart.sigma[1], 1.0);
        let after = net.predict(&rows, &heads).unwrap();
        for (a, b) in before.iter().flatten().zip(after.iter().flatten()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn popart_tracks_streaming_moments() {
        let mut p = PopArt::new(1, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3000 {
            let ys: Vec<f64> = (0..64).map(|_| 5.0 + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            p.observe(0, &ys);
        }
        assert!((p.mean[0] - 5.0).abs() < 0.1);
        assert!((p.sigma[0] - 2.0).abs() < 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(GvfConfig::default().validate().is_ok());
        let bad = GvfConfig {
            ema_rate: 0.0,
            ..GvfConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
