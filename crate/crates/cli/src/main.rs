mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Ctx;
use config::RunConfig;
use error::Result;

/// Bayesian neural language models: training, architecture search and
/// evaluation.
#[derive(Parser)]
#[command(name = "baylm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and BAYLM_SEED
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    /// Config override, e.g. `--set train.lr=0.01` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Only log warnings and errors
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write corpus splits, vocabulary and an n-gram model
    Prep,
    /// Train a baseline, Bayesian, GP or latent-output model
    Train,
    /// Train the super-network and rank architectures
    NasSearch,
    /// Perplexity of one model on a corpus
    Ppl,
    /// Fit interpolation weights by EM and report perplexities
    Interp,
    /// Rescore n-best lists and report WER
    Rescore,
    /// Signal-to-noise table of a Bayesian checkpoint
    Snr,
    /// Finite-difference gradient checks
    Gradcheck,
    /// Write the generated corpus and synthetic n-best lists
    Synth,
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref(), &c.overrides)?;
    cfg.resolve(c.seed, c.output_dir, matches!(cli.command, Command::NasSearch))?;
    let ctx = Ctx::new(cfg)?;
    match cli.command {
        Command::Prep => commands::prep::run(&ctx),
        Command::Train => commands::train::run(&ctx),
        Command::NasSearch => commands::nas::run(&ctx),
        Command::Ppl => commands::eval::ppl(&ctx),
        Command::Interp => commands::eval::interp(&ctx),
        Command::Rescore => commands::eval::rescore(&ctx),
        Command::Snr => commands::eval::snr(&ctx),
        Command::Gradcheck => commands::gradcheck::run(&ctx),
        Command::Synth => commands::synth::run(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
