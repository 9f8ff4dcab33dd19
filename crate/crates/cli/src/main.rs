mod commands;
mod config;
mod data;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};

const LONG_VERSION: &str =
    concat!(env!("CARGO_PKG_VERSION"), " (model format ", "1", ")");

/// Simulates analog in-memory weight noise and noise-aware BatchNorm calibration.
#[derive(Parser)]
#[command(name = "pimnb", version, long_version = LONG_VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Write the CSV here instead of stdout.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train a model and save it to model.path.
    Train,
    /// Accuracy of each variant across noise scales and seeds.
    Sweep,
    /// Re-estimate BatchNorm statistics under noise and save the model.
    Calibrate,
    /// Per-layer KL / JS divergence of BatchNorm outputs.
    Diagnose,
    /// Noise-injection training against dynamic calibration.
    CompareNit,
    /// Clean and noisy test accuracy of one model.
    Eval,
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let out = cli.output.as_deref();
    match cli.command {
        Command::Train => commands::cmd_train(&cfg, out),
        Command::Sweep => commands::cmd_sweep(&cfg, out),
        Command::Calibrate => commands::cmd_calibrate(&cfg, out),
        Command::Diagnose => commands::cmd_diagnose(&cfg, out),
        Command::CompareNit => commands::cmd_compare_nit(&cfg, out),
        Command::Eval => commands::cmd_eval(&cfg, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
