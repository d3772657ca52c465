mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

const THREADS_ENV: &str = "CLEVERCATCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "clevercatch", version, about = "Rule-guided weak supervision for prescription fraud detection")]
struct Cli {
    /// TOML config file with one section per stage.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs and for inputs whose paths are not given.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Config override, e.g. `--set detector.lambda=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted fraud.
    Simulate,
    /// Build the rule-contrast feature matrix.
    Featurize(FeaturizeArgs),
    /// Pretrain the rule and sample encoders.
    Pretrain(PretrainArgs),
    /// Score every prescriber by alignment cost alone.
    Pseudolabel(PseudolabelArgs),
    /// Train the detector.
    Train(TrainArgs),
    /// Score prescribers with a trained detector.
    Score(ScoreArgs),
    /// Compute PR-AUC, recall at K and a PR curve.
    Evaluate(EvaluateArgs),
    /// Run the rule-group and lambda ablations.
    Ablate(AblateArgs),
    /// Derive a rules file from drug targets, prices and opioid annotations.
    DeriveRules(DeriveArgs),
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    #[arg(long)]
    claims: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Output path; `.bin` selects the binary format.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    claims: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PseudolabelArgs {
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    encoders: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    features: Option<PathBuf>,
    /// Training labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Required unless lambda is 0.
    #[arg(long)]
    encoders: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// `npi,score` file; when absent the detector scores the features.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Ground-truth labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Labels files whose npis are left out of the evaluation. Repeatable.
    #[arg(long)]
    exclude: Vec<PathBuf>,
    /// Value of the report's `config` column.
    #[arg(long, default_value = "run")]
    name: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    curve_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Directory holding claims.csv, rules.csv, labels.csv, labels_train.csv.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DeriveArgs {
    #[arg(long)]
    claims: Option<PathBuf>,
    /// `drug,target` rows.
    #[arg(long)]
    drug_targets: Option<PathBuf>,
    /// `drug,likelihood[,weight]` rows.
    #[arg(long)]
    opioids: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = commands::Ctx {
        config,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Featurize(a) => commands::featurize(&ctx, a.claims, a.rules, a.out),
        Command::Pretrain(a) => commands::pretrain(&ctx, a.claims, a.rules, a.out),
        Command::Pseudolabel(a) => commands::pseudolabel(&ctx, a.features, a.rules, a.encoders, a.out),
        Command::Train(a) => commands::train(&ctx, a.features, a.labels, a.rules, a.encoders, a.out),
        Command::Score(a) => commands::score(&ctx, a.detector, a.features, a.out),
        Command::Evaluate(a) => commands::evaluate(
            &ctx,
            commands::EvaluateInputs {
                scores: a.scores,
                detector: a.detector,
                features: a.features,
                labels: a.labels,
                exclude: a.exclude,
                name: a.name,
                out: a.out,
                curve_out: a.curve_out,
            },
        ),
        Command::Ablate(a) => commands::ablate(&ctx, a.data_dir, a.out),
        Command::DeriveRules(a) => commands::derive_rules(&ctx, a.claims, a.drug_targets, a.opioids, a.out),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<clevercatch_core::Error>() {
            return e.kind();
        }
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error[{}]: {msg}", error_kind(&err));
            ExitCode::FAILURE
        }
    }
}
