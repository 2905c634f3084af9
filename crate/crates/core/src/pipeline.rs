//! Stage orchestration and the on-disk layout of a run directory.
//!
//! ```text
//! <out>/config.resolved.toml
//! <out>/family.json, dataset.gsfd
//! <out>/gvf/values.json, gvf/losses.csv
//! <out>/runs/<method>-seed<s>/{metrics.csv, label_metrics.csv, checkpoint.gsfp, eval.csv}
//! <out>/eval.csv, compare.csv, compare.txt
//! <out>/theory/{bound.csv, bound.json, norms.json}
//! <out>/gradcheck.csv
//! ```

use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{check_losses, label_metrics_csv, metrics_csv, train_agent, AgentError, AgentParams, Method, TrainOutcome};
use crate::config::{ConfigError, RunConfig};
use crate::datagen::{collect, train_behavior_policy, OfflineDataset};
use crate::env::{generate_family, Family};
use crate::evalbench::{compare, eval_csv, evaluate_all, parse_eval_csv, Comparison, EvalResult, Split};
use crate::gvf::{learn_all_gvfs, Cumulant, GvfValues};
use crate::theory::{random_walk_dataset, run_bound_grid, summarize_bounds, bound_csv, verify_norms, BoundSummary, NormReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::Stage { stage, .. } => Some(stage),
            PipelineError::Config(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn at<E: Into<Box<dyn StdError + Send + Sync>>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

fn timed<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    log::info!("stage {stage}: start");
    let out = f();
    log::info!("stage {stage}: {:.2}s", start.elapsed().as_secs_f64());
    out
}

/// Seeds of independent random streams derived from the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ stream
}

const FAMILY_STREAM: u64 = 1;
const BEHAVIOR_STREAM: u64 = 2;
const COLLECT_STREAM: u64 = 3;
const GVF_STREAM: u64 = 4;
const CUMULANT_STREAM: u64 = 5;
const AGENT_STREAM: u64 = 100;
const THEORY_STREAM: u64 = 6;

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.out.join("config.resolved.toml")
    }
    pub fn family(&self) -> PathBuf {
        self.out.join("family.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.out.join("dataset.gsfd")
    }
    pub fn gvf_values(&self) -> PathBuf {
        self.out.join("gvf").join("values.json")
    }
    pub fn gvf_losses(&self) -> PathBuf {
        self.out.join("gvf").join("losses.csv")
    }
    pub fn run_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.out.join("runs").join(format!("{}-seed{seed}", method.name()))
    }
    pub fn eval(&self) -> PathBuf {
        self.out.join("eval.csv")
    }
    pub fn compare_csv(&self) -> PathBuf {
        self.out.join("compare.csv")
    }
    pub fn compare_table(&self) -> PathBuf {
        self.out.join("compare.txt")
    }
    pub fn theory(&self) -> PathBuf {
        self.out.join("theory")
    }
    pub fn gradcheck(&self) -> PathBuf {
        self.out.join("gradcheck.csv")
    }
}

fn write(stage: &'static str, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(at(stage))?;
    }
    fs::write(path, contents).map_err(|e| PipelineError::Stage {
        stage,
        source: format!("{}: {e}", path.display()).into(),
    })
}

/// Validates the config and writes its resolved snapshot under `out`.
pub fn prepare(config: &RunConfig) -> Result<Layout> {
    config.validate()?;
    let layout = Layout::new(&config.out);
    write("setup", &layout.config(), config.to_toml())?;
    Ok(layout)
}

/// Generates the level family, learns the behavior policy and collects the
/// offline dataset over training levels.
pub fn gen_data(config: &RunConfig) -> Result<(Family, OfflineDataset)> {
    let layout = prepare(config)?;
    timed("gen-data", || {
        let stage = "gen-data";
        let family = generate_family(
            &config.family,
            derive_seed(config.seed, FAMILY_STREAM),
            config.split.train_levels,
            config.split.test_levels,
        )
        .map_err(at(stage))?;
        let q = train_behavior_policy(&family.mdp, &config.behavior, derive_seed(config.seed, BEHAVIOR_STREAM)).map_err(at(stage))?;
        let data = collect(&family, &q, &config.dataset, derive_seed(config.seed, COLLECT_STREAM)).map_err(at(stage))?;
        family.save(&layout.family()).map_err(at(stage))?;
        data.save(&layout.dataset()).map_err(at(stage))?;
        log::info!("collected {} transitions over {} levels", data.len(), data.levels().len());
        Ok((family, data))
    })
}

pub fn load_family(layout: &Layout, stage: &'static str) -> Result<Family> {
    Family::load(&layout.family()).map_err(at(stage))
}

pub fn load_dataset(layout: &Layout, stage: &'static str) -> Result<OfflineDataset> {
    OfflineDataset::load(&layout.dataset()).map_err(at(stage))
}

/// GVF values stored for contrastive training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredGvf {
    pub cumulant: String,
    pub gvf: GvfValues,
}

/// Learns per-level GVFs of the configured cumulant and stores one scalar
/// value per observation record.
pub fn train_gvf(config: &RunConfig) -> Result<StoredGvf> {
    let layout = prepare(config)?;
    timed("train-gvf", || {
        let stage = "train-gvf";
        let data = load_dataset(&layout, stage)?;
        let mut cumulant = Cumulant::new(
            config.cumulant.kind(),
            data.obs_len(),
            data.header.action_count,
            derive_seed(config.seed, CUMULANT_STREAM),
        )
        .map_err(at(stage))?;
        cumulant.estimate_c_max(&data);
        let model = learn_all_gvfs(&cumulant, &data, &data.levels(), &config.gvf, derive_seed(config.seed, GVF_STREAM))
            .map_err(at(stage))?;
        let gvf = model.scalar_values(&data).map_err(at(stage))?;
        if gvf.violations > 0 {
            log::warn!("{} GVF values exceeded the range bound {} and were clipped", gvf.violations, gvf.bound);
        }
        let mut losses = String::from("net,iteration,loss\n");
        for (n, trace) in model.traces.iter().enumerate() {
            for (i, l) in trace.losses.iter().enumerate() {
                losses.push_str(&format!("{n},{i},{l}\n"));
            }
        }
        write(stage, &layout.gvf_losses(), losses)?;
        let stored = StoredGvf {
            cumulant: config.cumulant.kind().name().to_string(),
            gvf,
        };
        write(stage, &layout.gvf_values(), serde_json::to_vec(&stored).map_err(at(stage))?)?;
        Ok(stored)
    })
}

pub fn load_gvf(layout: &Layout, config: &RunConfig, stage: &'static str) -> Result<StoredGvf> {
    let path = layout.gvf_values();
    let bytes = fs::read(&path).map_err(|e| PipelineError::Stage {
        stage,
        source: format!("{}: {e} (run train-gvf first)", path.display()).into(),
    })?;
    let stored: StoredGvf = serde_json::from_slice(&bytes).map_err(at(stage))?;
    let want = config.cumulant.kind().name();
    if stored.cumulant != want {
        return Err(PipelineError::Stage {
            stage,
            source: format!("stored GVF values use cumulant `{}`, config asks for `{want}`", stored.cumulant).into(),
        });
    }
    Ok(stored)
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub outcome: TrainOutcome,
    pub eval: EvalResult,
}

/// Seed of the agent for evaluation seed `seed`; shared across methods so
/// ablations start from the same initialization and minibatch stream.
pub fn agent_seed(config: &RunConfig, seed: u64) -> u64 {
    derive_seed(config.seed, AGENT_STREAM + seed)
}

/// Trains one method with one seed and evaluates it on every level.
pub fn train(config: &RunConfig, method: Method, seed: u64) -> Result<RunSummary> {
    let layout = prepare(config)?;
    let stage = "train";
    let family = load_family(&layout, stage)?;
    let data = load_dataset(&layout, stage)?;
    let gvf = match method {
        Method::Gsf if config.agent.nce_weight > 0.0 => Some(load_gvf(&layout, config, stage)?.gvf.values),
        _ => None,
    };
    let dir = layout.run_dir(method, seed);
    timed(&format!("train {} seed {seed}", method.name()), || {
        let mut last: Option<EvalResult> = None;
        let mut eval_err = None;
        let mut eval = |params: &AgentParams| match evaluate_all(params, &family, method.name(), seed, config.eval.episodes) {
            Ok(r) => {
                let out = (r.mean(Split::Train), r.mean(Split::Test));
                last = Some(r);
                out
            }
            Err(e) => {
                eval_err = Some(e);
                (f64::NAN, f64::NAN)
            }
        };
        let outcome = match train_agent(method, &data, gvf.as_deref(), &config.agent, agent_seed(config, seed), &mut eval) {
            Ok(o) => o,
            Err(AgentError::NonFinite { loss, step, params }) => {
                let path = dir.join("checkpoint.nonfinite.gsfp");
                let mut buf = Vec::new();
                params.write_checkpoint(&mut buf).map_err(at(stage))?;
                write(stage, &path, buf)?;
                return Err(PipelineError::Stage {
                    stage,
                    source: format!("non-finite {loss} loss at step {step}; last good parameters in {}", path.display()).into(),
                });
            }
            Err(e) => return Err(at(stage)(e)),
        };
        if let Some(e) = eval_err {
            return Err(at("eval")(e));
        }
        let eval = last.expect("at least one epoch was evaluated");
        write(stage, &dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
        write(stage, &dir.join("label_metrics.csv"), label_metrics_csv(&outcome.metrics))?;
        let mut buf = Vec::new();
        outcome.params.write_checkpoint(&mut buf).map_err(at(stage))?;
        write(stage, &dir.join("checkpoint.gsfp"), buf)?;
        write(stage, &dir.join("eval.csv"), eval_csv(std::slice::from_ref(&eval)))?;
        log::info!(
            "{} seed {seed}: train return {:.3}, test return {:.3}",
            method.name(),
            eval.mean(Split::Train),
            eval.mean(Split::Test)
        );
        Ok(RunSummary { outcome, eval })
    })
}

/// Re-evaluates a stored checkpoint.
pub fn eval(config: &RunConfig, method: Method, seed: u64) -> Result<EvalResult> {
    let layout = prepare(config)?;
    let stage = "eval";
    let family = load_family(&layout, stage)?;
    let dir = layout.run_dir(method, seed);
    let template = AgentParams::new(
        family.obs_len(),
        family.mdp.action_count,
        &config.agent,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let file = fs::File::open(dir.join("checkpoint.gsfp")).map_err(|e| PipelineError::Stage {
        stage,
        source: format!("{}: {e}", dir.join("checkpoint.gsfp").display()).into(),
    })?;
    let params = AgentParams::read_checkpoint(std::io::BufReader::new(file), &template).map_err(at(stage))?;
    timed("eval", || {
        let r = evaluate_all(&params, &family, method.name(), seed, config.eval.episodes).map_err(at(stage))?;
        write(stage, &dir.join("eval.csv"), eval_csv(std::slice::from_ref(&r)))?;
        Ok(r)
    })
}

/// Concatenates every run's evaluation into `<out>/eval.csv`, in
/// (method, seed) order of the config.
pub fn collect_evals(config: &RunConfig) -> Result<Vec<EvalResult>> {
    let layout = prepare(config)?;
    let stage = "eval";
    let mut all = Vec::new();
    for &method in &config.eval.methods {
        for &seed in &config.eval.seeds {
            let path = layout.run_dir(method, seed).join("eval.csv");
            match fs::read_to_string(&path) {
                Ok(text) => all.extend(parse_eval_csv(&text).map_err(at(stage))?),
                Err(_) => log::warn!("no evaluation for {} seed {seed}", method.name()),
            }
        }
    }
    write(stage, &layout.eval(), eval_csv(&all))?;
    Ok(all)
}

/// Baseline-normalized comparison of `<out>/eval.csv`.
pub fn compare_runs(config: &RunConfig) -> Result<Comparison> {
    let layout = prepare(config)?;
    let stage = "compare";
    let text = fs::read_to_string(layout.eval()).map_err(|e| PipelineError::Stage {
        stage,
        source: format!("{}: {e}", layout.eval().display()).into(),
    })?;
    let results = parse_eval_csv(&text).map_err(at(stage))?;
    let cmp = compare(&results, config.eval.baseline.name()).map_err(at(stage))?;
    write(stage, &layout.compare_csv(), cmp.csv())?;
    write(stage, &layout.compare_table(), cmp.table())?;
    Ok(cmp)
}

/// Every stage: data, GVFs (when a method needs them), all methods and
/// seeds, evaluation and comparison.
pub fn run_all(config: &RunConfig) -> Result<Comparison> {
    gen_data(config)?;
    if config.eval.methods.contains(&Method::Gsf) && config.agent.nce_weight > 0.0 {
        train_gvf(config)?;
    }
    for &seed in &config.eval.seeds {
        for &method in &config.eval.methods {
            train(config, method, seed)?;
        }
    }
    collect_evals(config)?;
    compare_runs(config)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoryOutcome {
    pub bound: BoundSummary,
    pub norms: NormReport,
}

/// Runs the concentration-bound grid and the successor-norm check.
pub fn verify_theory(config: &RunConfig) -> Result<TheoryOutcome> {
    let layout = prepare(config)?;
    timed("verify-theory", || {
        let stage = "verify-theory";
        let seed = derive_seed(config.seed, THEORY_STREAM);
        let reports = run_bound_grid(&config.theory.bound, seed).map_err(at(stage))?;
        let dir = layout.theory();
        write(stage, &dir.join("bound.csv"), bound_csv(&reports))?;
        let bound = summarize_bounds(reports);
        write(stage, &dir.join("bound.json"), serde_json::to_string_pretty(&bound).map_err(at(stage))?)?;
        let t = &config.theory.norms;
        let data = random_walk_dataset(t.states, t.right, t.steps, t.gamma, seed);
        let norms = verify_norms(&data, t.gamma, t.bins).map_err(at(stage))?;
        write(stage, &dir.join("norms.json"), serde_json::to_string_pretty(&norms).map_err(at(stage))?)?;
        log::info!(
            "bound: {}/{} non-vacuous points, {} failures; norms: rho {:.3} p {:.2e}, sandwich {}",
            bound.non_vacuous,
            bound.points,
            bound.failures,
            norms.spearman_rho,
            norms.p_value,
            if norms.sandwich_holds() { "holds" } else { "violated" }
        );
        Ok(TheoryOutcome { bound, norms })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub instance: usize,
    pub op: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Gradient checks of every graph op and every agent loss on `instances`
/// random instances each.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    let stage = "gradcheck";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for instance in 0..instances {
        let r = rng.random_range(1..6);
        let c = rng.random_range(1..6) * 2;
        let mut checks = gsf_tensor::gradcheck::check_ops(&mut rng, r, c, GRADCHECK_STEP, GRADCHECK_TOLERANCE).map_err(at(stage))?;
        checks.extend(check_losses(&mut rng, GRADCHECK_STEP, GRADCHECK_TOLERANCE).map_err(at(stage))?);
        rows.extend(checks.into_iter().map(|c| GradcheckRow {
            instance,
            op: c.op.to_string(),
            max_relative_error: c.report.worst(),
            passed: c.report.passed,
        }));
    }
    Ok(rows)
}

pub fn gradcheck(config: &RunConfig, instances: usize) -> Result<Vec<GradcheckRow>> {
    let layout = prepare(config)?;
    timed("gradcheck", || {
        let rows = gradcheck_suite(instances, config.seed)?;
        let mut csv = String::from("instance,op,max_relative_error,passed\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{},{}\n", r.instance, r.op, r.max_relative_error, r.passed));
        }
        write("gradcheck", &layout.gradcheck(), csv)?;
        Ok(rows)
    })
}
