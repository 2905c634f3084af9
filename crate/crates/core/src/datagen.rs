//! Behavior policy training and offline dataset collection.
//!
//! Dataset file layout (little endian):
//!
//! ```text
//! magic "GSFD" | version u8 | header_len u32 | header JSON
//! obs_count u32 | per observation: level u32 | cell u32 | len u32 | f64 * len
//! transition_count u64 | per transition: record_len u32 | record bytes
//! ```
//!
//! A transition record holds level u32, obs u32, next_obs u32, action u8,
//! reward f64, done u8, timestep u32, episode u32, behavior_eps f64 and
//! greedy_action u8. Observations are stored once per (level, cell) and
//! referenced by index.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{observe, EnvError, Family, LatentMdp, LevelSpec, CHANNELS};

pub const DATASET_MAGIC: &[u8; 4] = b"GSFD";
pub const DATASET_VERSION: u8 = 1;
const RECORD_LEN: u32 = 4 + 4 + 4 + 1 + 8 + 1 + 4 + 4 + 8 + 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("behavior policy failed from start {start}: greedy path {steps:?} vs shortest {shortest} after {episodes} episodes")]
    NotConverged {
        start: usize,
        steps: Option<usize>,
        shortest: usize,
        episodes: usize,
    },
    #[error("invalid collection config: {0}")]
    Config(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error("dataset file: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset header: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Tabular action values over latent cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    pub action_count: usize,
    pub values: Vec<f64>,
}

impl TabularQ {
    pub fn zeros(cells: usize, action_count: usize) -> Self {
        Self {
            action_count,
            values: vec![0.0; cells * action_count],
        }
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.action_count..(cell + 1) * self.action_count]
    }

    fn row_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.values[cell * self.action_count..(cell + 1) * self.action_count]
    }

    /// Greedy action, lowest index on ties.
    pub fn greedy(&self, cell: usize) -> usize {
        argmax(self.row(cell))
    }

    /// Steps taken by the greedy policy from `start` to the goal, if it
    /// arrives within `limit` steps.
    pub fn greedy_steps(&self, mdp: &LatentMdp, start: usize, limit: usize) -> Option<usize> {
        let mut s = start;
        for t in 1..=limit {
            let out = mdp.step(s, self.greedy(s)).ok()?;
            if out.done {
                return Some(t);
            }
            s = out.next;
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorConfig {
    pub episodes: usize,
    pub learning_rate: f64,
    /// Exploration rate while learning.
    pub epsilon: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            episodes: 3000,
            learning_rate: 0.5,
            epsilon: 0.5,
        }
    }
}

/// Q-learning on latent cells with exploring starts. The result is checked:
/// the greedy policy must reach the goal from every start cell within twice
/// the shortest-path length.
pub fn train_behavior_policy(mdp: &LatentMdp, config: &BehaviorConfig, seed: u64) -> Result<TabularQ, DataError> {
    if config.episodes == 0 {
        return Err(DataError::Config("behavior episodes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = TabularQ::zeros(mdp.cell_count(), mdp.action_count);
    let starts: Vec<usize> = mdp.free_cells().into_iter().filter(|&c| c != mdp.goal).collect();
    if starts.is_empty() {
        return Err(DataError::Config("layout has no non-goal free cell".into()));
    }
    for _ in 0..config.episodes {
        let mut s = starts[rng.random_range(0..starts.len())];
        for _ in 0..mdp.episode_cap {
            let a = if rng.random_bool(config.epsilon) {
                rng.random_range(0..mdp.action_count)
            } else {
                q.greedy(s)
            };
            let out = mdp.step(s, a)?;
            let bootstrap = if out.done {
                0.0
            } else {
                q.row(out.next).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            let target = out.reward + mdp.discount * bootstrap;
            let slot = &mut q.row_mut(s)[a];
            *slot += config.learning_rate * (target - *slot);
            if out.done {
                break;
            }
            s = out.next;
        }
    }
    let dist = mdp.goal_distances();
    for &start in &mdp.start_cells {
        let shortest = dist[start].unwrap_or(usize::MAX);
        let steps = q.greedy_steps(mdp, start, 2 * shortest);
        if steps.is_none() {
            return Err(DataError::NotConverged {
                start,
                steps,
                shortest,
                episodes: config.episodes,
            });
        }
    }
    Ok(q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub total_steps: usize,
    pub eps_start: f64,
    pub eps_end: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            eps_start: 0.1,
            eps_end: 0.0,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.total_steps == 0 {
            return Err(DataError::Config("total_steps must be positive".into()));
        }
        if !(0.0 <= self.eps_end && self.eps_end <= self.eps_start && self.eps_start <= 1.0) {
            return Err(DataError::Config("need 0 <= eps_end <= eps_start <= 1".into()));
        }
        Ok(())
    }

    /// `eps_t = eps_start - (eps_start - eps_end) * t / N`.
    pub fn epsilon(&self, t: usize) -> f64 {
        self.eps_start - (self.eps_start - self.eps_end) * t as f64 / self.total_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub level_id: u32,
    /// Index into the dataset's observation table.
    pub obs: u32,
    pub next_obs: u32,
    pub action: u8,
    pub reward: f64,
    pub done: bool,
    /// Step within the episode.
    pub timestep: u32,
    pub episode: u32,
    /// Exploration rate used to draw `action`.
    pub behavior_eps: f64,
    pub greedy_action: u8,
}

impl Transition {
    /// Behavior probability of `action` under the logged epsilon-greedy rule.
    pub fn behavior_prob(&self, action: usize, action_count: usize) -> f64 {
        let greedy = if action == self.greedy_action as usize { 1.0 } else { 0.0 };
        self.behavior_eps / action_count as f64 + (1.0 - self.behavior_eps) * greedy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub level_id: u32,
    pub cell: u32,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub level_id: u32,
    /// Global index of the episode's first transition.
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub master_seed: u64,
    pub collect_seed: u64,
    pub obs_shape: [usize; 3],
    pub action_count: usize,
    pub discount: f64,
    /// Levels the data was collected on.
    pub train_ids: Vec<u32>,
    /// Held-out levels; never present in the transitions.
    pub test_ids: Vec<u32>,
    pub collection: CollectConfig,
    pub episodes: Vec<EpisodeRecord>,
    pub level_counts: BTreeMap<u32, usize>,
    pub behavior: TabularQ,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub header: DatasetHeader,
    pub observations: Vec<ObsRecord>,
    pub transitions: Vec<Transition>,
    by_level: BTreeMap<u32, Vec<usize>>,
}

impl OfflineDataset {
    pub fn new(header: DatasetHeader, observations: Vec<ObsRecord>, transitions: Vec<Transition>) -> Self {
        let mut by_level: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, t) in transitions.iter().enumerate() {
            by_level.entry(t.level_id).or_default().push(i);
        }
        Self {
            header,
            observations,
            transitions,
            by_level,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn obs_len(&self) -> usize {
        self.header.obs_shape.iter().product()
    }

    pub fn obs(&self, index: u32) -> &[f64] {
        &self.observations[index as usize].data
    }

    pub fn cell(&self, index: u32) -> usize {
        self.observations[index as usize].cell as usize
    }

    pub fn levels(&self) -> Vec<u32> {
        self.by_level.keys().copied().collect()
    }

    /// Transition indices per level, in collection order.
    pub fn level_index(&self, level: u32) -> &[usize] {
        self.by_level.get(&level).map_or(&[], Vec::as_slice)
    }

    /// Index of the transition that follows `i` in the same episode.
    pub fn successor(&self, i: usize) -> Option<usize> {
        let t = &self.transitions[i];
        if t.done {
            return None;
        }
        self.transitions
            .get(i + 1)
            .filter(|n| n.episode == t.episode && n.timestep == t.timestep + 1)
            .map(|_| i + 1)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut w = BufWriter::new(w);
        w.write_all(DATASET_MAGIC)?;
        w.write_u8(DATASET_VERSION)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        w.write_u32::<LittleEndian>(self.observations.len() as u32)?;
        for o in &self.observations {
            w.write_u32::<LittleEndian>(o.level_id)?;
            w.write_u32::<LittleEndian>(o.cell)?;
            w.write_u32::<LittleEndian>(o.data.len() as u32)?;
            for v in &o.data {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        w.write_u64::<LittleEndian>(self.transitions.len() as u64)?;
        for t in &self.transitions {
            w.write_u32::<LittleEndian>(RECORD_LEN)?;
            w.write_u32::<LittleEndian>(t.level_id)?;
            w.write_u32::<LittleEndian>(t.obs)?;
            w.write_u32::<LittleEndian>(t.next_obs)?;
            w.write_u8(t.action)?;
            w.write_f64::<LittleEndian>(t.reward)?;
            w.write_u8(t.done as u8)?;
            w.write_u32::<LittleEndian>(t.timestep)?;
            w.write_u32::<LittleEndian>(t.episode)?;
            w.write_f64::<LittleEndian>(t.behavior_eps)?;
            w.write_u8(t.greedy_action)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, DataError> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(DataError::Format(format!("bad magic {magic:?}")));
        }
        let version = r.read_u8()?;
        if version != DATASET_VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let header_len = r.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: DatasetHeader = serde_json::from_slice(&header)?;
        let obs_count = r.read_u32::<LittleEndian>()? as usize;
        let mut observations = Vec::with_capacity(obs_count);
        for _ in 0..obs_count {
            let level_id = r.read_u32::<LittleEndian>()?;
            let cell = r.read_u32::<LittleEndian>()?;
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut data = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            observations.push(ObsRecord { level_id, cell, data });
        }
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut transitions = Vec::with_capacity(count);
        for i in 0..count {
            let len = r.read_u32::<LittleEndian>()?;
            if len != RECORD_LEN {
                return Err(DataError::Format(format!("record {i} has length {len}, expected {RECORD_LEN}")));
            }
            let t = Transition {
                level_id: r.read_u32::<LittleEndian>()?,
                obs: r.read_u32::<LittleEndian>()?,
                next_obs: r.read_u32::<LittleEndian>()?,
                action: r.read_u8()?,
                reward: r.read_f64::<LittleEndian>()?,
                done: r.read_u8()? != 0,
                timestep: r.read_u32::<LittleEndian>()?,
                episode: r.read_u32::<LittleEndian>()?,
                behavior_eps: r.read_f64::<LittleEndian>()?,
                greedy_action: r.read_u8()?,
            };
            if t.obs as usize >= obs_count || t.next_obs as usize >= obs_count {
                return Err(DataError::Format(format!("record {i} references a missing observation")));
            }
            transitions.push(t);
        }
        Ok(Self::new(header, observations, transitions))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.write(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::read(std::fs::File::open(path)?)
    }

    /// One JSON object per transition, with latent cells in place of the
    /// observation tensors.
    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut w = BufWriter::new(w);
        for t in &self.transitions {
            let line = serde_json::json!({
                "level_id": t.level_id,
                "cell": self.cell(t.obs),
                "next_cell": self.cell(t.next_obs),
                "action": t.action,
                "reward": t.reward,
                "done": t.done,
                "timestep": t.timestep,
                "episode": t.episode,
                "behavior_eps": t.behavior_eps,
                "greedy_action": t.greedy_action,
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seed for one episode, derived from the collection seed and its position.
pub fn episode_seed(seed: u64, level_id: u32, episode: u32) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((level_id as u64) << 32) | episode as u64);
    rng.random()
}

/// One latent step sequence produced by the epsilon-greedy behavior policy.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStep {
    pub cell: usize,
    pub next: usize,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub epsilon: f64,
    pub greedy: usize,
}

/// Runs one episode starting at global step `t_start`, stopping at the goal,
/// the episode cap, or `budget` steps.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    mdp: &LatentMdp,
    q: &TabularQ,
    config: &CollectConfig,
    seed: u64,
    level_id: u32,
    episode: u32,
    t_start: usize,
    budget: usize,
) -> Result<Vec<LatentStep>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, level_id, episode));
    let mut s = mdp.start_cells[rng.random_range(0..mdp.start_cells.len())];
    let mut steps = Vec::new();
    for k in 0..mdp.episode_cap.min(budget) {
        let epsilon = config.epsilon(t_start + k);
        let greedy = q.greedy(s);
        let action = if rng.random::<f64>() < epsilon {
            rng.random_range(0..mdp.action_count)
        } else {
            greedy
        };
        let out = mdp.step(s, action)?;
        steps.push(LatentStep {
            cell: s,
            next: out.next,
            action,
            reward: out.reward,
            done: out.done,
            epsilon,
            greedy,
        });
        if out.done {
            break;
        }
        s = out.next;
    }
    Ok(steps)
}

/// Rolls out the behavior policy through each train level in round-robin
/// order until exactly `total_steps` transitions are logged.
pub fn collect(family: &Family, q: &TabularQ, config: &CollectConfig, seed: u64) -> Result<OfflineDataset, DataError> {
    config.validate()?;
    let mdp = &family.mdp;
    let levels: &[LevelSpec] = &family.train;
    let mut obs_index: HashMap<(u32, usize), u32> = HashMap::new();
    let mut observations = Vec::new();
    let mut intern = |level: &LevelSpec, cell: usize| -> u32 {
        *obs_index.entry((level.level_id, cell)).or_insert_with(|| {
            observations.push(ObsRecord {
                level_id: level.level_id,
                cell: cell as u32,
                data: observe(mdp, level, cell).data().to_vec(),
            });
            (observations.len() - 1) as u32
        })
    };
    let mut transitions = Vec::with_capacity(config.total_steps);
    let mut episodes = Vec::new();
    let mut episode = 0u32;
    while transitions.len() < config.total_steps {
        let level = &levels[episode as usize % levels.len()];
        let start = transitions.len();
        let steps = run_episode(mdp, q, config, seed, level.level_id, episode, start, config.total_steps - start)?;
        for (k, st) in steps.iter().enumerate() {
            let obs = intern(level, st.cell);
            let next_obs = intern(level, st.next);
            transitions.push(Transition {
                level_id: level.level_id,
                obs,
                next_obs,
                action: st.action as u8,
                reward: st.reward,
                done: st.done,
                timestep: k as u32,
                episode,
                behavior_eps: st.epsilon,
                greedy_action: st.greedy as u8,
            });
        }
        episodes.push(EpisodeRecord {
            level_id: level.level_id,
            start,
            len: steps.len(),
        });
        episode += 1;
    }
    let mut level_counts = BTreeMap::new();
    for t in &transitions {
        *level_counts.entry(t.level_id).or_insert(0) += 1;
    }
    let header = DatasetHeader {
        master_seed: family.master_seed,
        collect_seed: seed,
        obs_shape: [CHANNELS, mdp.height, mdp.width],
        action_count: mdp.action_count,
        discount: mdp.discount,
        train_ids: family.train_ids(),
        test_ids: family.test_ids(),
        collection: config.clone(),
        episodes,
        level_counts,
        behavior: q.clone(),
    };
    Ok(OfflineDataset::new(header, observations, transitions))
}

/// One latent step used to build tabular datasets directly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentTransition {
    pub cell: usize,
    pub action: usize,
    pub reward: f64,
    pub next: usize,
    pub done: bool,
}

/// Dataset over `states` latent states with one-hot observations of shape
/// `[1, 1, states]`, all on level 0. Every transition is logged as drawn
/// uniformly at random (`behavior_eps = 1`).
pub fn tabular_dataset(states: usize, action_count: usize, discount: f64, episodes: &[Vec<LatentTransition>]) -> OfflineDataset {
    let observations = (0..states)
        .map(|s| {
            let mut data = vec![0.0; states];
            data[s] = 1.0;
            ObsRecord {
                level_id: 0,
                cell: s as u32,
                data,
            }
        })
        .collect();
    let mut transitions = Vec::new();
    let mut records = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        records.push(EpisodeRecord {
            level_id: 0,
            start: transitions.len(),
            len: ep.len(),
        });
        for (k, t) in ep.iter().enumerate() {
            transitions.push(Transition {
                level_id: 0,
                obs: t.cell as u32,
                next_obs: t.next as u32,
                action: t.action as u8,
                reward: t.reward,
                done: t.done,
                timestep: k as u32,
                episode: e as u32,
                behavior_eps: 1.0,
                greedy_action: 0,
            });
        }
    }
    let header = DatasetHeader {
        master_seed: 0,
        collect_seed: 0,
        obs_shape: [1, 1, states],
        action_count,
        discount,
        train_ids: vec![0],
        test_ids: Vec::new(),
        collection: CollectConfig {
            total_steps: transitions.len().max(1),
            eps_start: 1.0,
            eps_end: 1.0,
        },
        episodes: records,
        level_counts: BTreeMap::from([(0, transitions.len())]),
        behavior: TabularQ::zeros(states, action_count),
    };
    OfflineDataset::new(header, observations, transitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_family, Action, FamilyConfig};

    fn small_family() -> Family {
        generate_family(&FamilyConfig::default(), 11, 3, 2).unwrap()
    }

    #[test]
    fn corridor_prefers_the_goal_direction() {
        let mdp = LatentMdp::open(2, 1, 1, vec![0], 0.99);
        let q = train_behavior_policy(&mdp, &BehaviorConfig::default(), 0).unwrap();
        let row = q.row(0);
        assert!(row[Action::Right as usize] > row[Action::Left as usize]);
        assert!((row[Action::Right as usize] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn greedy_paths_are_near_shortest() {
        let f = small_family();
        let q = train_behavior_policy(&f.mdp, &BehaviorConfig::default(), 5).unwrap();
        let dist = f.mdp.goal_distances();
        for &s in &f.mdp.start_cells {
            let d = dist[s].unwrap();
            assert!(q.greedy_steps(&f.mdp, s, 2 * d).unwrap() <= 2 * d);
        }
    }

    #[test]
    fn epsilon_schedule_is_linear() {
        let c = CollectConfig {
            total_steps: 1000,
            eps_start: 0.1,
            eps_end: 0.0,
        };
        assert_eq!(c.epsilon(0), 0.1);
        assert!((c.epsilon(500) - 0.05).abs() < 1e-15);
        let bad = CollectConfig {
            eps_start: 0.1,
            eps_end: 0.2,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epsilon_is_fully_greedy() {
        let f = small_family();
        let q = train_behavior_policy(&f.mdp, &BehaviorConfig::default(), 5).unwrap();
        let c = CollectConfig {
            total_steps: 2000,
            eps_start: 0.0,
            eps_end: 0.0,
        };
        let d = collect(&f, &q, &c, 1).unwrap();
        assert!(d.transitions.iter().all(|t| t.action == t.greedy_action));
    }

    #[test]
    fn collection_counts_and_structure() {
        let f = small_family();
        let q = train_behavior_policy(&f.mdp, &BehaviorConfig::default(), 5).unwrap();
        let c = CollectConfig {
            total_steps: 3001,
            ..CollectConfig::default()
        };
        let d = collect(&f, &q, &c, 9).unwrap();
        assert_eq!(d.len(), 3001);
        assert_eq!(d.header.level_counts.values().sum::<usize>(), 3001);
        assert_eq!(d.levels(), f.train_ids());
        for (i, t) in d.transitions.iter().enumerate() {
            if t.done {
                assert!(i + 1 == d.len() || d.transitions[i + 1].timestep == 0);
            }
            assert!(t.reward == 0.0 || t.reward == 1.0);
            assert_eq!(t.reward == 1.0, t.done);
            assert_eq!(d.cell(t.next_obs), f.mdp.step(d.cell(t.obs), t.action as usize).unwrap().next);
        }
        // round robin by episode
        for (e, rec) in d.header.episodes.iter().enumerate() {
            assert_eq!(rec.level_id, f.train[e % 3].level_id);
        }
    }

    #[test]
    fn episodes_replay_from_their_seed() {
        let f = small_family();
        let q = train_behavior_policy(&f.mdp, &BehaviorConfig::default(), 5).unwrap();
        let c = CollectConfig {
            total_steps: 2000,
            ..CollectConfig::default()
        };
        let d = collect(&f, &q, &c, 4).unwrap();
        for (e, rec) in d.header.episodes.iter().enumerate().step_by(7) {
            let steps = run_episode(&f.mdp, &q, &c, 4, rec.level_id, e as u32, rec.start, c.total_steps - rec.start).unwrap();
            assert_eq!(steps.len(), rec.len);
            for (k, st) in steps.iter().enumerate() {
                let t = &d.transitions[rec.start + k];
                assert_eq!((st.action as u8, st.cell), (t.action, d.cell(t.obs)));
            }
        }
    }

    #[test]
    fn binary_round_trip_and_bad_magic() {
        let f = small_family();
        let q = train_behavior_policy(&f.mdp, &BehaviorConfig::default(), 5).unwrap();
        let c = CollectConfig {
            total_steps: 500,
            ..CollectConfig::default()
        };
        let d = collect(&f, &q, &c, 2).unwrap();
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], DATASET_MAGIC);
        assert_eq!(buf[4], DATASET_VERSION);
        assert_eq!(OfflineDataset::read(buf.as_slice()).unwrap(), d);
        buf[0] = b'X';
        assert!(matches!(OfflineDataset::read(buf.as_slice()), Err(DataError::Format(_))));
        let mut lines = Vec::new();
        d.write_jsonl(&mut lines).unwrap();
        assert_eq!(String::from_utf8(lines).unwrap().lines().count(), 500);
    }

    #[test]
    fn behavior_probabilities_sum_to_one() {
        let t = Transition {
            level_id: 0,
            obs: 0,
            next_obs: 0,
            action: 1,
            reward: 0.0,
            done: false,
            timestep: 0,
            episode: 0,
            behavior_eps: 0.3,
            greedy_action: 2,
        };
        let total: f64 = (0..4).map(|a| t.behavior_prob(a, 4)).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!((t.behavior_prob(2, 4) - (0.075 + 0.7)).abs() < 1e-15);
    }
}
