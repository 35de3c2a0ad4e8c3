mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{error::ErrorKind, CommandFactory, Parser, Subcommand, ValueEnum};
use laoc::controllers::{ControllerConfig, ControllerKind, Mapping};
use laoc::harness::{evaluate, EvalOptions};
use laoc::learning::{finetune_safe, train_pure, Normalizers, PolicyFile, PolicyNet, TrainConfig, TrainingHeader};
use laoc::model::{Episode, SystemParams};
use laoc::priors::PriorConfig;
use laoc::traces::{gen_synthetic, load_csv, perturb_ood, write_csv};
use laoc::verify::{run_all, VerifyContext, VerifyOptions};
use log::{info, warn};
use serde_json::json;

use crate::config::{echo, FileConfig};

#[derive(Parser, Debug)]
#[command(name = "laoc", version, about = "Safety-constrained learning-augmented control of a water tank")]
struct Cli {
    /// JSON file with `system`, `safety`, `train`, `profile`, `prior`, `seed`, `jobs` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for episode evaluation.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic hourly traces.
    Gen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        horizon: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Add out-of-distribution demand noise.
        #[arg(long)]
        ood: bool,
    },
    /// Train a policy on the average loss, or finetune it through the safe set.
    Train {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum, default_value_t = Mode::Pure)]
        mode: Mode,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum)]
        prior: Option<PriorName>,
        /// Policy to start finetuning from. Without it a pure policy is trained first.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        horizon: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate controllers on a trace file and write the metrics table.
    Bench {
        #[arg(long)]
        traces: PathBuf,
        /// Policy file. Without it a seeded untrained network stands in.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "prior,pure_ml,laoc")]
        controllers: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.4")]
        lambdas: Vec<f64>,
        /// Weight on the ML action for `lin`.
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, value_enum, default_value_t = MappingName::Linear)]
        mapping: MappingName,
        #[arg(long, value_enum)]
        prior: Option<PriorName>,
        /// Value of the `dataset` column. Defaults to the trace file stem.
        #[arg(long)]
        dataset: Option<String>,
        /// Perturb the loaded traces with out-of-distribution demand noise.
        #[arg(long)]
        ood: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        horizon: Option<u64>,
        /// Output CSV. Printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance checks and print one line per check.
    Verify {
        /// Reduced episode counts.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        inject_corrupt_q: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Pure,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PriorName {
    Ogd,
    Robd,
    Mpc,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MappingName {
    Linear,
    Projection,
}

impl From<MappingName> for Mapping {
    fn from(m: MappingName) -> Self {
        match m {
            MappingName::Linear => Mapping::Linear,
            MappingName::Projection => Mapping::Projection,
        }
    }
}

const DEFAULT_SEED: u64 = 2024;

fn usage_error(message: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::InvalidValue, message).exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();

    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => usage_error(format!("{e:#}")),
    };
    let jobs = cli.jobs.map(|j| j as usize).or(file.jobs);
    let outcome = match cli.command {
        Command::Gen { seed, episodes, horizon, out, ood } => cmd_gen(&file, seed, episodes as usize, horizon, &out, ood),
        Command::Train { traces, epochs, lr, batch_size, mode, lambda, prior, init, seed, horizon, out } => {
            let args = TrainArgs { traces, epochs, lr, batch_size, mode, lambda, prior, init, seed, horizon, out };
            cmd_train(&file, args)
        }
        Command::Bench { traces, policy, controllers, lambdas, rho, mapping, prior, dataset, ood, seed, horizon, out } => {
            let args = BenchArgs { traces, policy, controllers, lambdas, rho, mapping, prior, dataset, ood, seed, horizon, out };
            cmd_bench(&file, args, jobs)
        }
        Command::Verify { quick, seed, inject_corrupt_q } => cmd_verify(&file, quick, seed, jobs, inject_corrupt_q),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn system_with_horizon(file: &FileConfig, horizon: Option<u64>) -> SystemParams {
    let mut system = file.system.clone();
    if let Some(h) = horizon {
        system.horizon = h as usize;
    }
    system
}

fn prior_choice(file: &FileConfig, flag: Option<PriorName>) -> PriorConfig {
    match flag {
        Some(name) => {
            let text = format!("{name:?}");
            PriorConfig::from_name(&text).expect("every prior name parses")
        }
        None => file.prior.clone().unwrap_or_else(PriorConfig::ogd),
    }
}

fn load_traces(path: &Path, system: &SystemParams) -> Result<Vec<Episode>> {
    let episodes = load_csv(path, system.horizon).with_context(|| format!("cannot load traces from {}", path.display()))?;
    if episodes.is_empty() {
        anyhow::bail!("{} holds no complete episode of {} rows", path.display(), system.horizon);
    }
    for ep in &episodes {
        ep.validate(system).with_context(|| format!("episode {} in {}", ep.id, path.display()))?;
    }
    info!("loaded {} episodes from {}", episodes.len(), path.display());
    Ok(episodes)
}

fn cmd_gen(file: &FileConfig, seed: Option<u64>, episodes: usize, horizon: Option<u64>, out: &Path, ood: bool) -> Result<ExitCode> {
    let seed = seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let horizon = horizon.map(|h| h as usize).unwrap_or(file.system.horizon);
    let mut eps = gen_synthetic(seed, episodes, horizon, &file.profile)?;
    if ood {
        eps = perturb_ood(&eps, seed)?;
    }
    let header = echo(&json!({
        "command": "gen",
        "seed": seed,
        "episodes": episodes,
        "horizon": horizon,
        "ood": ood,
        "profile": file.profile,
    }));
    write_csv(out, &eps, Some(&header)).with_context(|| format!("cannot write {}", out.display()))?;
    info!("wrote {} rows to {}", episodes * horizon, out.display());
    Ok(ExitCode::SUCCESS)
}

struct TrainArgs {
    traces: PathBuf,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    mode: Mode,
    lambda: Option<f64>,
    prior: Option<PriorName>,
    init: Option<PathBuf>,
    seed: Option<u64>,
    horizon: Option<u64>,
    out: PathBuf,
}

fn cmd_train(file: &FileConfig, args: TrainArgs) -> Result<ExitCode> {
    let lambda = match (args.mode, args.lambda) {
        (Mode::Finetune, None) => usage_error("--mode finetune needs --lambda"),
        (Mode::Finetune, Some(l)) if !(l > 0.0 && l.is_finite()) => usage_error(format!("--lambda must be positive, got {l}")),
        (Mode::Pure, Some(_)) => {
            warn!("--lambda is ignored in pure mode");
            None
        }
        (_, l) => l,
    };
    if args.init.is_some() && args.mode == Mode::Pure {
        warn!("--init is ignored in pure mode");
    }
    let config = TrainConfig {
        learning_rate: args.lr.unwrap_or(file.train.learning_rate),
        epochs: args.epochs.unwrap_or(file.train.epochs),
        batch_size: args.batch_size.unwrap_or(file.train.batch_size),
        seed: args.seed.or(file.seed).unwrap_or(file.train.seed),
    };
    if let Err(e) = config.validate() {
        usage_error(e);
    }
    let system = system_with_horizon(file, args.horizon);
    let prior = prior_choice(file, args.prior);
    let dataset = load_traces(&args.traces, &system)?;

    let started = Instant::now();
    let (policy, header) = match args.mode {
        Mode::Pure => {
            let report = train_pure(&dataset, &system, &config)?;
            let header = training_header("pure", &config, None, None, report.loss_curve);
            (report.policy, header)
        }
        Mode::Finetune => {
            let lambda = lambda.expect("checked above");
            let init = match &args.init {
                Some(path) => {
                    let f = PolicyFile::load(path).with_context(|| format!("cannot load policy {}", path.display()))?;
                    if f.system != system {
                        warn!("{} was trained with different system parameters", path.display());
                    }
                    f.policy
                }
                None => {
                    info!("no --init policy, training a pure policy first");
                    train_pure(&dataset, &system, &config)?.policy
                }
            };
            let safe = file.safety.build(&system, lambda)?;
            let report = finetune_safe(&init, &dataset, &system, &safe, &prior, &config)?;
            info!("finetuning saw {} binding rounds out of {}", report.stats.binding_rounds, report.stats.rounds);
            let header = training_header("finetune", &config, Some(lambda), Some(prior.name()), report.loss_curve);
            (report.policy, header)
        }
    };
    info!("training took {:.1?}", started.elapsed());
    PolicyFile::new(policy, system, header).save(&args.out).with_context(|| format!("cannot write {}", args.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn training_header(mode: &str, config: &TrainConfig, lambda: Option<f64>, prior: Option<&str>, loss_curve: Vec<f64>) -> TrainingHeader {
    TrainingHeader {
        mode: mode.into(),
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        seed: config.seed,
        lambda,
        prior: prior.map(str::to_string),
        loss_curve,
    }
}

struct BenchArgs {
    traces: PathBuf,
    policy: Option<PathBuf>,
    controllers: Vec<String>,
    lambdas: Vec<f64>,
    rho: f64,
    mapping: MappingName,
    prior: Option<PriorName>,
    dataset: Option<String>,
    ood: bool,
    seed: Option<u64>,
    horizon: Option<u64>,
    out: Option<PathBuf>,
}

fn cmd_bench(file: &FileConfig, args: BenchArgs, jobs: Option<usize>) -> Result<ExitCode> {
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let system = system_with_horizon(file, args.horizon);
    let prior = prior_choice(file, args.prior);
    if args.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        usage_error(format!("--lambdas must be finite and >= 0, got {:?}", args.lambdas));
    }
    let mut controllers = Vec::new();
    for name in &args.controllers {
        let Some(kind) = ControllerKind::from_name(name.trim()) else {
            usage_error(format!("unknown controller {name:?}; expected laoc, lin, lin_plus, pure_ml, prior or opt"));
        };
        let config = ControllerConfig { rho: args.rho, mapping: args.mapping.into(), ..ControllerConfig::new(kind, args.lambdas[0], prior.clone()) };
        for &lambda in &args.lambdas {
            if let Err(e) = (ControllerConfig { lambda, ..config.clone() }).validate() {
                usage_error(format!("{name}: {e}"));
            }
        }
        controllers.push(config);
    }

    let mut episodes = load_traces(&args.traces, &system)?;
    if args.ood {
        episodes = perturb_ood(&episodes, seed)?;
    }
    let policy = match &args.policy {
        Some(path) => {
            let f = PolicyFile::load(path).with_context(|| format!("cannot load policy {}", path.display()))?;
            if f.system != system {
                warn!("{} was trained with different system parameters", path.display());
            }
            f.policy
        }
        None => {
            if controllers.iter().any(|c| !matches!(c.kind, ControllerKind::PriorOnly | ControllerKind::Opt)) {
                warn!("no --policy given, the ML controllers use an untrained network seeded with {seed}");
            }
            PolicyNet::init(seed, Normalizers::from_episodes(&episodes))
        }
    };
    let dataset = args.dataset.clone().unwrap_or_else(|| {
        let stem = args.traces.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "traces".into());
        if args.ood {
            format!("{stem}-ood")
        } else {
            stem
        }
    });
    let options = EvalOptions { jobs, constants: file.safety };
    let table = evaluate(&controllers, &episodes, &args.lambdas, &dataset, &system, &policy, options)?;
    let header = echo(&json!({
        "command": "bench",
        "traces": args.traces,
        "policy": args.policy,
        "controllers": controllers.iter().map(|c| c.kind.name()).collect::<Vec<_>>(),
        "lambdas": args.lambdas,
        "rho": args.rho,
        "mapping": Mapping::from(args.mapping),
        "prior": prior,
        "dataset": dataset,
        "ood": args.ood,
        "seed": seed,
        "system": system,
        "safety": file.safety,
    }));
    match &args.out {
        Some(path) => table.write_csv(path, Some(&header)).with_context(|| format!("cannot write {}", path.display()))?,
        None => print!("{}", table.to_csv_string(Some(&header))),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(file: &FileConfig, quick: bool, seed: Option<u64>, jobs: Option<usize>, corrupt: bool) -> Result<ExitCode> {
    let opts = VerifyOptions { quick, seed: seed.or(file.seed).unwrap_or(VerifyOptions::default().seed), jobs, corrupt_reservation: corrupt };
    let started = Instant::now();
    let ctx = VerifyContext::new(opts)?;
    let results = run_all(&ctx);
    for r in &results {
        println!("{}", r.line());
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed in {:.1}s", results.len(), started.elapsed().as_secs_f64());
    Ok(if passed == results.len() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
