//! Procedurally generated gridworld family.
//!
//! Every level shares one [`LatentMdp`] (walls, goal, start cells, dynamics and
//! reward). Levels differ only in how a latent cell is rendered into an
//! [`Observation`]: distractor markers, a fixed per-level noise texture, and a
//! permutation of the nuisance channels.
//!
//! Channel layout before the level permutation is applied:
//!
//! | channel | content |
//! |---------|---------|
//! | 0 | agent position (one-hot) |
//! | 1 | walls |
//! | 2 | goal |
//! | 3 | distractor marker, kind A |
//! | 4 | distractor marker, kind B |
//! | 5 | fixed noise texture scaled by the level's amplitude |
//!
//! Channels 0..=2 are never permuted; the permutation shuffles 3..=5.

use std::collections::VecDeque;
use std::path::Path;

use gsf_tensor::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHANNELS: usize = 6;
pub const AGENT_CHANNEL: usize = 0;
pub const WALL_CHANNEL: usize = 1;
pub const GOAL_CHANNEL: usize = 2;
pub const NUISANCE_CHANNELS: [usize; 3] = [3, 4, 5];
pub const ACTION_COUNT: usize = 4;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cell {cell} is outside the {width}x{height} grid")]
    OutOfBounds {
        cell: usize,
        width: usize,
        height: usize,
    },
    #[error("cell {0} is a wall")]
    WallCell(usize),
    #[error("action {action} out of range (action count {count})")]
    BadAction { action: usize, count: usize },
    #[error("no layout with a reachable goal after {0} attempts")]
    Unreachable(usize),
    #[error("invalid family config: {0}")]
    Config(String),
    #[error("family file: {0}")]
    Io(#[from] std::io::Error),
    #[error("family file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyConfig {
    pub width: usize,
    pub height: usize,
    /// Probability that a cell is a wall.
    pub wall_fraction: f64,
    pub start_cells: usize,
    /// Fraction of free non-goal cells carrying a distractor marker.
    pub distractor_fraction: f64,
    /// Scale of the per-level noise texture.
    pub noise_amplitude: f64,
    pub discount: f64,
    /// Episodes are truncated after this many steps.
    pub episode_cap: usize,
    pub max_retries: usize,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            width: 9,
            height: 9,
            wall_fraction: 0.2,
            start_cells: 4,
            distractor_fraction: 0.25,
            noise_amplitude: 0.5,
            discount: 0.99,
            episode_cap: 100,
            max_retries: 64,
        }
    }
}

impl FamilyConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.width < 2 || self.height < 1 {
            return bad("grid must have at least two cells");
        }
        if !(0.0..1.0).contains(&self.wall_fraction) {
            return bad("wall_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return bad("distractor_fraction must lie in [0, 1]");
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return bad("noise_amplitude must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        if self.start_cells == 0 || self.episode_cap == 0 || self.max_retries == 0 {
            return bad("start_cells, episode_cap and max_retries must be positive");
        }
        Ok(())
    }
}

/// The latent MDP shared by every level of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMdp {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<bool>,
    pub goal: usize,
    pub start_cells: Vec<usize>,
    pub action_count: usize,
    pub discount: f64,
    pub episode_cap: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next: usize,
    pub reward: f64,
    pub done: bool,
}

impl LatentMdp {
    /// A wall-free `width x height` grid, mostly for tests and oracles.
    pub fn open(width: usize, height: usize, goal: usize, start_cells: Vec<usize>, discount: f64) -> Self {
        Self {
            width,
            height,
            walls: vec![false; width * height],
            goal,
            start_cells,
            action_count: ACTION_COUNT,
            discount,
            episode_cap: 100,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    pub fn is_free(&self, cell: usize) -> bool {
        cell < self.cell_count() && !self.walls[cell]
    }

    pub fn free_cells(&self) -> Vec<usize> {
        (0..self.cell_count()).filter(|&c| !self.walls[c]).collect()
    }

    fn check_cell(&self, cell: usize) -> Result<(), EnvError> {
        if cell >= self.cell_count() {
            return Err(EnvError::OutOfBounds {
                cell,
                width: self.width,
                height: self.height,
            });
        }
        if self.walls[cell] {
            return Err(EnvError::WallCell(cell));
        }
        Ok(())
    }

    /// Cell reached by `action` from `cell`, ignoring validity checks.
    fn target(&self, cell: usize, action: Action) -> usize {
        let (x, y) = self.coords(cell);
        let (dx, dy) = action.delta();
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
            return cell;
        }
        let next = ny as usize * self.width + nx as usize;
        if self.walls[next] {
            cell
        } else {
            next
        }
    }

    /// Deterministic transition. Moves into walls or off the grid leave the
    /// agent in place; entering the goal pays 1 and ends the episode.
    pub fn step(&self, cell: usize, action: usize) -> Result<StepOutcome, EnvError> {
        self.check_cell(cell)?;
        let a = Action::from_index(action)
            .filter(|_| action < self.action_count)
            .ok_or(EnvError::BadAction {
                action,
                count: self.action_count,
            })?;
        let next = self.target(cell, a);
        let done = next == self.goal;
        Ok(StepOutcome {
            next,
            reward: if done { 1.0 } else { 0.0 },
            done,
        })
    }

    /// Shortest-path length from every cell to the goal (`None` for walls and
    /// cells that cannot reach it).
    pub fn goal_distances(&self) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.cell_count()];
        if !self.is_free(self.goal) {
            return dist;
        }
        dist[self.goal] = Some(0);
        let mut queue = VecDeque::from([self.goal]);
        while let Some(c) = queue.pop_front() {
            let d = dist[c].unwrap();
            // Moves are reversible on a grid, so the predecessors of `c` are
            // its free neighbours.
            for a in Action::ALL {
                let p = self.target(c, a);
                if p != c && dist[p].is_none() {
                    dist[p] = Some(d + 1);
                    queue.push_back(p);
                }
            }
        }
        dist
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub cell: usize,
    /// 0 renders into marker channel A, 1 into marker channel B.
    pub kind: u8,
}

/// Level-specific observation function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level_id: u32,
    pub rng_seed: u64,
    /// Output channel `c` shows source channel `channel_permutation[c]`.
    pub channel_permutation: Vec<usize>,
    pub noise_mask: Vec<f64>,
    pub noise_amplitude: f64,
    pub distractors: Vec<Distractor>,
}

impl LevelSpec {
    /// Builds the level deterministically from `rng_seed` and the shared layout.
    pub fn generate(mdp: &LatentMdp, level_id: u32, rng_seed: u64, config: &FamilyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut nuisance = NUISANCE_CHANNELS;
        nuisance.shuffle(&mut rng);
        let mut channel_permutation: Vec<usize> = (0..CHANNELS).collect();
        for (slot, src) in NUISANCE_CHANNELS.iter().zip(nuisance) {
            channel_permutation[*slot] = src;
        }
        let noise_mask = (0..mdp.cell_count()).map(|_| rng.random::<f64>()).collect();
        let mut candidates: Vec<usize> = mdp.free_cells().into_iter().filter(|&c| c != mdp.goal).collect();
        candidates.shuffle(&mut rng);
        let count = (config.distractor_fraction * candidates.len() as f64).round() as usize;
        let mut distractors: Vec<Distractor> = candidates
            .into_iter()
            .take(count)
            .map(|cell| Distractor {
                cell,
                kind: rng.random_range(0..2u8),
            })
            .collect();
        distractors.sort_by_key(|d| d.cell);
        Self {
            level_id,
            rng_seed,
            channel_permutation,
            noise_mask,
            noise_amplitude: config.noise_amplitude,
            distractors,
        }
    }
}

/// A `channels x height x width` observation tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(Tensor);

impl Observation {
    pub fn new(tensor: Tensor) -> Self {
        debug_assert_eq!(tensor.ndim(), 3);
        Self(tensor)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.shape();
        self.0.data()[(c * h + y) * w + x]
    }

    /// Spatial plane of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.shape();
        &self.0.data()[c * h * w..(c + 1) * h * w]
    }

    /// Cell index holding the largest value of the agent channel.
    pub fn agent_cell(&self) -> usize {
        let plane = self.channel(AGENT_CHANNEL);
        let mut best = 0;
        for (i, v) in plane.iter().enumerate() {
            if *v > plane[best] {
                best = i;
            }
        }
        best
    }
}

/// Renders latent cell `cell` through `level`'s observation function.
pub fn observe(mdp: &LatentMdp, level: &LevelSpec, cell: usize) -> Observation {
    let (h, w) = (mdp.height, mdp.width);
    let plane = h * w;
    let mut source = vec![0.0; CHANNELS * plane];
    source[AGENT_CHANNEL * plane + cell] = 1.0;
    for (c, &wall) in mdp.walls.iter().enumerate() {
        if wall {
            source[WALL_CHANNEL * plane + c] = 1.0;
        }
    }
    source[GOAL_CHANNEL * plane + mdp.goal] = 1.0;
    for d in &level.distractors {
        source[(3 + d.kind as usize) * plane + d.cell] = 1.0;
    }
    for (c, &n) in level.noise_mask.iter().enumerate() {
        source[5 * plane + c] = level.noise_amplitude * n;
    }
    let mut data = vec![0.0; CHANNELS * plane];
    for (out_c, &src_c) in level.channel_permutation.iter().enumerate() {
        data[out_c * plane..(out_c + 1) * plane].copy_from_slice(&source[src_c * plane..(src_c + 1) * plane]);
    }
    Observation(Tensor::new(vec![CHANNELS, h, w], data).expect("observation shape"))
}

/// One latent MDP with its train and test levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub master_seed: u64,
    pub config: FamilyConfig,
    pub mdp: LatentMdp,
    pub train: Vec<LevelSpec>,
    pub test: Vec<LevelSpec>,
}

impl Family {
    pub fn level(&self, level_id: u32) -> Option<&LevelSpec> {
        self.train.iter().chain(&self.test).find(|l| l.level_id == level_id)
    }

    pub fn train_ids(&self) -> Vec<u32> {
        self.train.iter().map(|l| l.level_id).collect()
    }

    pub fn test_ids(&self) -> Vec<u32> {
        self.test.iter().map(|l| l.level_id).collect()
    }

    pub fn observe(&self, level: &LevelSpec, cell: usize) -> Observation {
        observe(&self.mdp, level, cell)
    }

    pub fn obs_len(&self) -> usize {
        CHANNELS * self.mdp.cell_count()
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

fn random_layout(config: &FamilyConfig, rng: &mut ChaCha8Rng) -> Option<LatentMdp> {
    let n = config.width * config.height;
    let walls: Vec<bool> = (0..n).map(|_| rng.random_bool(config.wall_fraction)).collect();
    let free: Vec<usize> = (0..n).filter(|&c| !walls[c]).collect();
    if free.len() < config.start_cells + 1 {
        return None;
    }
    let goal = *free.choose(rng)?;
    let mut mdp = LatentMdp {
        width: config.width,
        height: config.height,
        walls,
        goal,
        start_cells: Vec::new(),
        action_count: ACTION_COUNT,
        discount: config.discount,
        episode_cap: config.episode_cap,
    };
    let dist = mdp.goal_distances();
    // Every free cell must reach the goal.
    if free.iter().any(|&c| dist[c].is_none()) {
        return None;
    }
    let max_d = free.iter().filter_map(|&c| dist[c]).max().unwrap_or(0);
    let far = (max_d / 2).max(1);
    let mut candidates: Vec<usize> = free.iter().copied().filter(|&c| dist[c].unwrap() >= far).collect();
    if candidates.len() < config.start_cells {
        candidates = free.iter().copied().filter(|&c| c != goal).collect();
    }
    candidates.shuffle(rng);
    let mut starts: Vec<usize> = candidates.into_iter().take(config.start_cells).collect();
    starts.sort_unstable();
    mdp.start_cells = starts;
    Some(mdp)
}

/// Generates the shared layout and `m_train + m_test` levels from one seed.
///
/// Train levels get ids `0..m_train`, test levels `m_train..m_train + m_test`.
pub fn generate_family(
    config: &FamilyConfig,
    master_seed: u64,
    m_train: usize,
    m_test: usize,
) -> Result<Family, EnvError> {
    config.validate()?;
    if m_train == 0 || m_test == 0 {
        return Err(EnvError::Config("need at least one train and one test level".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut mdp = None;
    for _ in 0..config.max_retries {
        if let Some(m) = random_layout(config, &mut rng) {
            mdp = Some(m);
            break;
        }
    }
    let mdp = mdp.ok_or(EnvError::Unreachable(config.max_retries))?;
    let mut levels: Vec<LevelSpec> = (0..m_train + m_test)
        .map(|i| {
            let seed = rng.random::<u64>();
            LevelSpec::generate(&mdp, i as u32, seed, config)
        })
        .collect();
    let test = levels.split_off(m_train);
    Ok(Family {
        master_seed,
        config: config.clone(),
        mdp,
        train: levels,
        test,
    })
}
