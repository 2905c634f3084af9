//! The run configuration: one TOML document holding every stage's settings.
//!
//! ```toml
//! seed = 0
//! out = "runs/default"
//! cumulant = "reward"        # reward | sf | action
//!
//! [split]
//! train_levels = 20
//! test_levels = 20
//!
//! [agent]
//! steps = 3000
//! loss = "cce"               # cce | pairwise
//! ```
//!
//! Every key is optional and unknown keys are rejected. Sections: `family`,
//! `split`, `behavior`, `dataset`, `gvf`, `agent`, `eval`, `theory`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, Method};
use crate::datagen::{BehaviorConfig, CollectConfig};
use crate::env::FamilyConfig;
use crate::gvf::{CumulantKind, GvfConfig};
use crate::theory::BoundGrid;

/// An invalid configuration, with the dotted path of the offending key.
#[derive(Debug, Error)]
#[error("config error at `{path}`: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl ToString) -> Self {
        Self {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CumulantChoice {
    Reward,
    Sf,
    Action,
}

impl CumulantChoice {
    pub fn kind(self) -> CumulantKind {
        match self {
            CumulantChoice::Reward => CumulantKind::Reward,
            CumulantChoice::Sf => CumulantKind::successor_features(),
            CumulantChoice::Action => CumulantKind::ActionIndicator,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_levels: usize,
    pub test_levels: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_levels: 20,
            test_levels: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Episodes per level; episode `e` starts from start cell `e mod |starts|`.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub baseline: Method,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 4,
            seeds: vec![0, 1, 2, 3, 4],
            methods: vec![Method::Gsf, Method::Cql, Method::Bc],
            baseline: Method::Cql,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    pub states: usize,
    /// Probability of stepping right in the random walk.
    pub right: f64,
    pub steps: usize,
    pub bins: usize,
    pub gamma: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            states: 30,
            right: 0.6,
            steps: 20_000,
            bins: 7,
            gamma: 0.99,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub bound: BoundGrid,
    pub norms: NormConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    pub cumulant: CumulantChoice,
    pub family: FamilyConfig,
    pub split: SplitConfig,
    pub behavior: BehaviorConfig,
    pub dataset: CollectConfig,
    pub gvf: GvfConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            threads: 0,
            cumulant: CumulantChoice::Reward,
            family: FamilyConfig::default(),
            split: SplitConfig::default(),
            behavior: BehaviorConfig::default(),
            dataset: CollectConfig::default(),
            gvf: GvfConfig {
                iterations: 3000,
                ..GvfConfig::default()
            },
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses without validating.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::new("", e.message()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(path, e.into_inner().message())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The configuration as TOML, written next to run outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.family.validate().map_err(|e| ConfigError::new("family", e))?;
        if self.split.train_levels == 0 {
            return Err(ConfigError::new("split.train_levels", "must be at least 1"));
        }
        if self.split.test_levels == 0 {
            return Err(ConfigError::new("split.test_levels", "must be at least 1"));
        }
        if self.behavior.episodes == 0 {
            return Err(ConfigError::new("behavior.episodes", "must be at least 1"));
        }
        if !(self.behavior.learning_rate > 0.0 && self.behavior.learning_rate <= 1.0) {
            return Err(ConfigError::new("behavior.learning_rate", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.behavior.epsilon) {
            return Err(ConfigError::new("behavior.epsilon", "must lie in [0, 1]"));
        }
        self.dataset.validate().map_err(|e| ConfigError::new("dataset", e))?;
        self.gvf.validate().map_err(|e| ConfigError::new("gvf", e))?;
        self.agent.validate().map_err(|e| ConfigError::new("agent", e))?;
        if self.agent.levels_per_batch > self.split.train_levels && self.agent.batch_size / self.split.train_levels < self.agent.bins {
            return Err(ConfigError::new(
                "agent.batch_size",
                "too small to give every training level K rows per minibatch",
            ));
        }
        if self.eval.episodes == 0 {
            return Err(ConfigError::new("eval.episodes", "must be at least 1"));
        }
        if self.eval.seeds.is_empty() {
            return Err(ConfigError::new("eval.seeds", "needs at least one seed"));
        }
        if !self.eval.methods.contains(&self.eval.baseline) {
            return Err(ConfigError::new("eval.baseline", "must be one of eval.methods"));
        }
        let t = &self.theory.bound;
        if t.trials < 100 {
            return Err(ConfigError::new("theory.bound.trials", "must be at least 100"));
        }
        if let Some(e) = self.theory.bound.experiments(0).iter().find_map(|e| e.validate().err()) {
            return Err(ConfigError::new("theory.bound", e));
        }
        let t2 = &self.theory.norms;
        if t2.states < t2.bins || t2.bins == 0 {
            return Err(ConfigError::new("theory.norms.states", "must be at least bins"));
        }
        if !(t2.gamma > 0.0 && t2.gamma < 1.0) {
            return Err(ConfigError::new("theory.norms.gamma", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&t2.right) {
            return Err(ConfigError::new("theory.norms.right", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::parse("[agent]\nsteps = 10\ntemprature = 0.5\n").unwrap_err();
        assert_eq!(err.path, "agent.temprature");
        assert!(err.message.contains("unknown field"));
        let err = RunConfig::parse("seed = \"x\"\n").unwrap_err();
        assert_eq!(err.path, "seed");
    }

    #[test]
    fn invalid_values_name_their_section() {
        let mut c = RunConfig::default();
        c.agent.temperature = 0.0;
        assert_eq!(c.validate().unwrap_err().path, "agent");
        let mut c = RunConfig::default();
        c.eval.baseline = Method::Bc;
        c.eval.methods = vec![Method::Gsf];
        assert_eq!(c.validate().unwrap_err().path, "eval.baseline");
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.cumulant = CumulantChoice::Sf;
        c.agent.learning_rate = 3e-4;
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
