use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gsf_core::agent::{ContrastiveLoss, Method};
use gsf_core::config::{ConfigError, CumulantChoice, RunConfig};
use gsf_core::evalbench::Split;
use gsf_core::pipeline::{self, PipelineError};

/// Offline RL with representations shaped by quantile-binned general value functions.
#[derive(Debug, Parser)]
#[command(name = "gsf", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the level family and collect the offline dataset.
    GenData,
    /// Learn per-level GVFs and store their values.
    TrainGvf {
        #[arg(long, value_enum)]
        cumulant: Option<CumulantArg>,
    },
    /// Train one agent.
    Train(TrainArgs),
    /// Re-evaluate a trained checkpoint, or gather all evaluations with `--all`.
    Eval {
        #[arg(long, value_enum, default_value = "gsf")]
        method: MethodArg,
        #[arg(long, default_value_t = 0)]
        run_seed: u64,
        /// Collect every configured run into `<out>/eval.csv`.
        #[arg(long)]
        all: bool,
    },
    /// Compare methods in `<out>/eval.csv` against the baseline.
    Compare,
    /// Monte-Carlo check of the concentration bound and the successor-norm check.
    VerifyTheory {
        /// Trials per grid point.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Gradient checks of every graph op and agent loss.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Every stage in order, for every configured method and seed.
    Run(TrainOverrides),
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long, value_enum)]
    cumulant: Option<CumulantArg>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Quantile bins.
    #[arg(long)]
    k: Option<usize>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Conservative penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, value_enum, default_value = "gsf")]
    method: MethodArg,
    /// Evaluation seed of this run.
    #[arg(long, default_value_t = 0)]
    run_seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CumulantArg {
    Reward,
    Sf,
    Action,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Cce,
    Pairwise,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Gsf,
    Cql,
    Bc,
}

impl From<CumulantArg> for CumulantChoice {
    fn from(c: CumulantArg) -> Self {
        match c {
            CumulantArg::Reward => CumulantChoice::Reward,
            CumulantArg::Sf => CumulantChoice::Sf,
            CumulantArg::Action => CumulantChoice::Action,
        }
    }
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gsf => Method::Gsf,
            MethodArg::Cql => Method::Cql,
            MethodArg::Bc => Method::Bc,
        }
    }
}

impl TrainOverrides {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(c) = self.cumulant {
            config.cumulant = c.into();
        }
        if let Some(l) = self.loss {
            config.agent.loss = match l {
                LossArg::Cce => ContrastiveLoss::Cce,
                LossArg::Pairwise => ContrastiveLoss::Pairwise,
            };
        }
        if let Some(k) = self.k {
            config.agent.bins = k;
        }
        if let Some(t) = self.tau {
            config.agent.temperature = t;
        }
        if let Some(l) = self.lambda {
            config.agent.cql_weight = l;
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out = o.clone();
    }
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    match &cli.command {
        Command::TrainGvf { cumulant: Some(c) } => config.cumulant = (*c).into(),
        Command::Train(a) => a.overrides.apply(&mut config),
        Command::Run(o) => o.apply(&mut config),
        Command::VerifyTheory { trials: Some(t) } => config.theory.bound.trials = *t,
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli, config: &RunConfig) -> Result<()> {
    if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::GenData => {
            let (_, data) = pipeline::gen_data(config)?;
            println!("{} transitions written to {}", data.len(), config.out.join("dataset.gsfd").display());
        }
        Command::TrainGvf { .. } => {
            let stored = pipeline::train_gvf(config)?;
            println!("{} GVF values ({}) written", stored.gvf.values.len(), stored.cumulant);
        }
        Command::Train(args) => {
            let run = pipeline::train(config, args.method.into(), args.run_seed)?;
            println!(
                "train return {:.4}, test return {:.4}",
                run.eval.mean(Split::Train),
                run.eval.mean(Split::Test)
            );
        }
        Command::Eval { method, run_seed, all } => {
            if *all {
                let results = pipeline::collect_evals(config)?;
                println!("{} evaluations collected", results.len());
            } else {
                let r = pipeline::eval(config, (*method).into(), *run_seed)?;
                println!("train return {:.4}, test return {:.4}", r.mean(Split::Train), r.mean(Split::Test));
            }
        }
        Command::Compare => print!("{}", pipeline::compare_runs(config)?.table()),
        Command::VerifyTheory { .. } => {
            let t = pipeline::verify_theory(config)?;
            println!(
                "bound check: {} points, {} non-vacuous, {} failures",
                t.bound.points, t.bound.non_vacuous, t.bound.failures
            );
            println!(
                "successor norms: spearman {:.3} (p = {:.2e}), sandwich {}",
                t.norms.spearman_rho,
                t.norms.p_value,
                if t.norms.sandwich_holds() { "holds" } else { "violated" }
            );
        }
        Command::Gradcheck { instances } => {
            let rows = pipeline::gradcheck(config, *instances)?;
            let failed: Vec<_> = rows.iter().filter(|r| !r.passed).collect();
            let worst = rows.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
            println!("{} checks, {} failed, worst relative error {worst:.2e}", rows.len(), failed.len());
            if let Some(f) = failed.first() {
                anyhow::bail!("gradient check failed for `{}` (instance {})", f.op, f.instance);
            }
        }
        Command::Run(_) => print!("{}", pipeline::run_all(config)?.table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GSF_LOG", "info")).init();
    let cli = Cli::parse();
    let config = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<PipelineError>() {
                Some(PipelineError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
