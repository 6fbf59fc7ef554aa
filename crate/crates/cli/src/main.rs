//! `sbi-engine`: simulate, train, sample, diagnose and analyze from the
//! command line, one stage at a time or as a configured pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use sbi_core::pipeline::{
    analyze_stage, diagnose_stage, load_dataset, load_posterior, read_rows, run_pipeline, sample_stage, simulate_stage,
    train_stage, AnalysisKind, Check, DiagnoseInputs, PipelineError, RunConfig,
};
use sbi_core::simulators::{default_workers, SimulatorConfig};
use sbi_core::{ContinuousDistribution, Tensor};

#[derive(Parser, Debug)]
#[command(name = "sbi-engine", version, about = "Simulation-based inference engine")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.batch_size=100`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw parameters from the prior and simulate a training set.
    Simulate(SimulateArgs),
    /// Train a posterior, likelihood or ratio estimator on a dataset.
    Train(TrainArgs),
    /// Sample a trained posterior at an observation.
    Sample(SampleArgs),
    /// Run one calibration or misspecification check.
    Diagnose(DiagnoseArgs),
    /// Summarize a posterior: moments, conditionals, MAP, decisions, corner data.
    Analyze(AnalyzeArgs),
    /// Run simulate, train, sample, diagnose and analyze from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulator name (ball_throw, ddm) or a JSON object such as
    /// `{"name":"linear_gaussian","dim":2,"sigma":0.1}`.
    #[arg(long)]
    simulator: Option<String>,
    /// Prior as a JSON file or inline JSON.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    train_seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct SamplerFlags {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// `sir` or `prior`.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    sir_pool: Option<usize>,
    /// Comma-separated initial slice widths, one per dimension.
    #[arg(long)]
    step_width: Option<String>,
    #[arg(long)]
    max_step_outs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// npe, nle or nre.
    #[arg(long)]
    method: Option<String>,
    /// mdn, flow or mixed.
    #[arg(long)]
    estimator: Option<String>,
    /// Prior as a JSON file or inline JSON; the dataset's prior when absent.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    posterior: PathBuf,
    /// Delimited rows file, or inline comma-separated values.
    #[arg(long)]
    observation: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// ppc, sbc, coverage, tarp, lc2st or misspec.
    #[arg(long)]
    check: String,
    #[arg(long)]
    posterior: PathBuf,
    #[arg(long)]
    observation: Option<String>,
    /// Needed by every check except misspec.
    #[arg(long)]
    simulator: Option<String>,
    /// Posterior samples at the observation (ppc).
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Training dataset (misspec).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    /// Posterior draws per calibration pair.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// moments, conditional, map, decision or corner.
    #[arg(long)]
    what: String,
    #[arg(long)]
    posterior: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    observation: Option<String>,
    /// Conditioned dimensions for `conditional`, comma-separated.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    n_simulations: Option<usize>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    estimator: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Debug)]
enum Failure {
    Error(PipelineError),
    ChecksFailed,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Error(e)
    }
}

fn config_help() -> String {
    let mut s = String::from("Config fields (set in the --config JSON file or with --set PATH=VALUE):\n");
    for (path, example) in RunConfig::field_paths() {
        s.push_str(&format!("  {path:<44} e.g. {example}\n"));
    }
    s.push_str(
        "\n  simulator.name is one of ball_throw, linear_gaussian (dim, sigma), ddm (dt, max_time).\n  \
         prior.kind is one of box_uniform (lower, upper), gaussian (mean, std),\n  \
         truncated_normal (loc, scale, low, high).\n\nEnvironment: SBI_ENGINE_THREADS caps worker pools.\n",
    );
    s
}

fn base_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(SimulatorConfig::ball_throw(), vec![]),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("--set expects PATH=VALUE, got {kv}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, path: &str, v: &Option<T>) -> Result<(), PipelineError> {
    match v {
        Some(v) => cfg.set(path, &v.to_string()),
        None => Ok(()),
    }
}

fn set_simulator(cfg: &mut RunConfig, s: &Option<String>) -> Result<(), PipelineError> {
    match s.as_deref().map(str::trim) {
        Some(s) if s.starts_with('{') => cfg.set("simulator", s),
        Some(name) => cfg.set("simulator", &format!("{{\"name\":\"{name}\"}}")),
        None => Ok(()),
    }
}

/// JSON text from a file path or inline.
fn json_arg(s: &str) -> Result<String, PipelineError> {
    let p = Path::new(s);
    if !s.trim_start().starts_with('{') && p.exists() {
        std::fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{s}: {e}")))
    } else {
        Ok(s.to_string())
    }
}

fn set_observation(cfg: &mut RunConfig, s: &Option<String>) -> Result<(), PipelineError> {
    let Some(s) = s else { return Ok(()) };
    let rows = if Path::new(s).exists() {
        let t = read_rows(Path::new(s))?;
        t.iter_rows().map(<[f64]>::to_vec).collect()
    } else {
        let row = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| PipelineError::Config(format!("observation {s} is neither a file nor numbers")))?;
        vec![row]
    };
    cfg.observation = rows;
    Ok(())
}

fn apply_train(cfg: &mut RunConfig, t: &TrainFlags) -> Result<(), PipelineError> {
    set_opt(cfg, "train.batch_size", &t.batch_size)?;
    set_opt(cfg, "train.learning_rate", &t.learning_rate)?;
    set_opt(cfg, "train.validation_fraction", &t.validation_fraction)?;
    set_opt(cfg, "train.patience", &t.patience)?;
    set_opt(cfg, "train.max_epochs", &t.max_epochs)?;
    set_opt(cfg, "train.seed", &t.train_seed)
}

fn apply_sampler(cfg: &mut RunConfig, s: &SamplerFlags) -> Result<(), PipelineError> {
    set_opt(cfg, "sampler.chains", &s.chains)?;
    set_opt(cfg, "sampler.warmup", &s.warmup)?;
    set_opt(cfg, "sampler.thin", &s.thin)?;
    set_opt(cfg, "sampler.init", &s.init)?;
    set_opt(cfg, "sampler.sir_pool", &s.sir_pool)?;
    set_opt(cfg, "sampler.step_width", &s.step_width.as_ref().map(|w| format!("[{w}]")))?;
    set_opt(cfg, "sampler.max_step_outs", &s.max_step_outs)
}

fn sampler_given(s: &SamplerFlags) -> bool {
    s.chains.is_some()
        || s.warmup.is_some()
        || s.thin.is_some()
        || s.init.is_some()
        || s.sir_pool.is_some()
        || s.step_width.is_some()
        || s.max_step_outs.is_some()
}

fn require_observation(cfg: &RunConfig) -> Result<(), PipelineError> {
    if cfg.observation.is_empty() {
        return Err(PipelineError::Config(
            "an observation is required (--observation or config)".into(),
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::Simulate(a) => {
            set_simulator(&mut cfg, &a.simulator)?;
            if let Some(p) = &a.prior {
                cfg.set("prior", &json_arg(p)?)?;
            }
            set_opt(&mut cfg, "simulation.n", &a.n)?;
            set_opt(&mut cfg, "seeds.simulate", &a.seed)?;
            set_opt(&mut cfg, "simulation.workers", &a.workers)?;
            let ds = simulate_stage(&cfg, &a.out)?;
            println!(
                "wrote {} rows ({} discarded) to {}",
                ds.len(),
                ds.meta.discarded,
                a.out.display()
            );
        }
        Command::Train(a) => {
            let ds = load_dataset(&a.data)?;
            match &a.prior {
                Some(p) => cfg.set("prior", &json_arg(p)?)?,
                None if cfg.prior.is_none() => cfg.prior = ds.meta.prior.clone(),
                None => {}
            }
            set_opt(&mut cfg, "method", &a.method)?;
            set_opt(&mut cfg, "estimator.kind", &a.estimator)?;
            apply_train(&mut cfg, &a.train)?;
            apply_sampler(&mut cfg, &a.sampler)?;
            let (post, report) = train_stage(&cfg, &ds, &a.out)?;
            println!(
                "trained {:?} posterior: best epoch {} (validation loss {:.6}), wrote {}",
                post.kind(),
                report.best_epoch,
                report.best_val_loss,
                a.out.display()
            );
        }
        Command::Sample(a) => {
            let mut post = load_posterior(&a.posterior)?;
            set_observation(&mut cfg, &a.observation)?;
            require_observation(&cfg)?;
            set_opt(&mut cfg, "sampling.n", &a.n)?;
            set_opt(&mut cfg, "seeds.sample", &a.seed)?;
            if sampler_given(&a.sampler) {
                if let Some(stored) = post.sampler_config() {
                    cfg.sampler = stored;
                }
                apply_sampler(&mut cfg, &a.sampler)?;
                post = post
                    .with_sampler(cfg.sampler.clone())
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
            }
            let samples = sample_stage(&cfg, &post, &a.out)?;
            println!("wrote {} draws to {}", samples.rows(), a.out.display());
        }
        Command::Diagnose(a) => {
            let check = Check::parse(&a.check).ok_or_else(|| PipelineError::Config(format!("unknown check {}", a.check)))?;
            let post = load_posterior(&a.posterior)?;
            cfg.prior = Some(post.prior().spec());
            set_simulator(&mut cfg, &a.simulator)?;
            set_observation(&mut cfg, &a.observation)?;
            set_opt(&mut cfg, "seeds.diagnose", &a.seed)?;
            check.enable(&mut cfg.diagnostics);
            let section = format!("diagnostics.{}", check.name());
            if !matches!(check, Check::Misspec | Check::Ppc) {
                set_opt(&mut cfg, &format!("{section}.pairs"), &a.pairs)?;
            }
            if matches!(check, Check::Sbc | Check::Coverage | Check::Tarp) {
                set_opt(&mut cfg, &format!("{section}.draws"), &a.draws)?;
            }
            if check == Check::Ppc {
                set_opt(&mut cfg, "diagnostics.ppc.draws", &a.draws)?;
            }
            if matches!(check, Check::Ppc | Check::Lc2st | Check::Misspec) {
                require_observation(&cfg)?;
            }
            let samples = a.samples.as_deref().map(read_rows).transpose()?;
            let dataset = a.data.as_deref().map(load_dataset).transpose()?;
            let inputs = DiagnoseInputs {
                posterior: &post,
                samples: samples.as_ref(),
                dataset: dataset.as_ref(),
            };
            let outcome = diagnose_stage(&cfg, check, &inputs, &a.out_dir)?;
            println!("{}", outcome.line());
            if !outcome.passed {
                return Err(Failure::ChecksFailed);
            }
        }
        Command::Analyze(a) => {
            let what =
                AnalysisKind::parse(&a.what).ok_or_else(|| PipelineError::Config(format!("unknown analysis {}", a.what)))?;
            let post = load_posterior(&a.posterior)?;
            cfg.prior = Some(post.prior().spec());
            set_observation(&mut cfg, &a.observation)?;
            set_opt(&mut cfg, "seeds.analyze", &a.seed)?;
            match what {
                AnalysisKind::Conditional => {
                    if let Some(d) = &a.dims {
                        cfg.set("analysis.conditional.dims", &format!("[{d}]"))?;
                    }
                }
                AnalysisKind::Corner => set_opt(&mut cfg, "analysis.corner.bins", &a.bins)?,
                AnalysisKind::Map => set_opt(&mut cfg, "analysis.map.restarts", &a.restarts)?,
                _ => {}
            }
            if matches!(what, AnalysisKind::Conditional | AnalysisKind::Map) {
                require_observation(&cfg)?;
            }
            let samples: Tensor = read_rows(&a.samples)?;
            if samples.cols() != post.prior().dim() {
                return Err(PipelineError::Config("samples do not match the posterior dimension".into()).into());
            }
            let path = analyze_stage(&cfg, what, &post, &samples, &a.out_dir)?;
            println!("wrote {}", path.display());
        }
        Command::Pipeline(a) => {
            if cli.config.is_none() {
                return Err(PipelineError::Config("pipeline needs --config".into()).into());
            }
            if let Some(d) = &a.out_dir {
                cfg.paths.out_dir = d.clone();
            }
            set_opt(&mut cfg, "simulation.n", &a.n_simulations)?;
            set_opt(&mut cfg, "method", &a.method)?;
            set_opt(&mut cfg, "estimator.kind", &a.estimator)?;
            apply_train(&mut cfg, &a.train)?;
            apply_sampler(&mut cfg, &a.sampler)?;
            let outcome = run_pipeline(&cfg)?;
            for c in &outcome.checks {
                println!("{}", c.line());
            }
            println!("artifacts in {}", outcome.out_dir.display());
            if !outcome.passed() {
                return Err(Failure::ChecksFailed);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = config_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    for name in ["pipeline", "simulate", "train", "sample", "diagnose", "analyze"] {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(h));
    }
    let matches = cmd.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(default_workers()).build_global() {
        eprintln!("warning: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::ChecksFailed) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
