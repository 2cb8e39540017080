//! `crowdveil` — craft and evaluate bounded adversarial perturbations
//! against localized crowd-counting models.
//!
//! Pipeline: `gen-data` → `train-surrogate` (per paradigm) →
//! `train-generator` → `attack` / `evaluate` / `transfer-matrix`.
//! Every command reads one TOML config (flags override), writes only under
//! the output root, and records a provenance manifest.

mod commands;
mod config;
mod manifest;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crowdveil_core::{ErrorCategory, Result};

use config::{RunConfig, Workspace};

#[derive(Debug, Parser)]
#[command(name = "crowdveil", version, about = "Bounded adversarial perturbations against crowd counters")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the config file and $CROWDVEIL_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/test scene splits.
    GenData(commands::gen_data::GenDataArgs),
    /// Train a counting surrogate (density-map or point-regression).
    TrainSurrogate(commands::train_surrogate::TrainSurrogateArgs),
    /// Train a perturbation generator against a frozen surrogate.
    TrainGenerator(commands::train_generator::TrainGeneratorArgs),
    /// Write adversarial images for a split with budget statistics.
    Attack(commands::attack::AttackArgs),
    /// Measure one generator against one target model, with visualizations.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Cross-evaluate generators × targets and print the transfer matrix.
    TransferMatrix(commands::transfer::TransferArgs),
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(a) => a.apply(&mut cfg),
        Command::TrainSurrogate(a) => a.apply(&mut cfg),
        Command::TrainGenerator(a) => a.apply(&mut cfg)?,
        Command::Attack(a) => a.apply(&mut cfg),
        Command::Evaluate(a) => a.apply(&mut cfg),
        Command::TransferMatrix(a) => a.apply(&mut cfg),
    }
    cfg.validate()?;
    let ws = Workspace::resolve(cli.out.clone(), &cfg);

    match &cli.command {
        Command::GenData(_) => commands::gen_data::run(&cfg, &ws),
        Command::TrainSurrogate(_) => commands::train_surrogate::run(&cfg, &ws),
        Command::TrainGenerator(a) => commands::train_generator::run(&cfg, &ws, a),
        Command::Attack(a) => commands::attack::run(&cfg, &ws, a),
        Command::Evaluate(a) => commands::evaluate::run(&cfg, &ws, a),
        Command::TransferMatrix(a) => commands::transfer::run(&cfg, &ws, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
                ErrorCategory::Other => 1,
            })
        }
    }
}
