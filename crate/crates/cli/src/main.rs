//! `mmda`: prepare corpora, synthesize toy domains, train, evaluate, sweep
//! scenarios and check gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{keys_help, Config};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {1}", .0.display())]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Core(#[from] mmda_core::Error),
    /// The command finished but left some inputs out.
    #[error("{0}")]
    Partial(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Partial(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mmda", version, about, after_long_help = keys_help())]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Override any config key, e.g. `--set lambda=0.2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Canonicalize a folder of class subdirectories into a manifest.
    Prep {
        /// Directory with `covid/` and `non-covid/` subdirectories.
        input: PathBuf,
    },
    /// Write a synthetic two-domain corpus.
    Synth,
    /// Train on an episode built from the source and target manifests.
    Train,
    /// Score a checkpoint on labeled records.
    Eval,
    /// Run every scenario, K and seed plus source-only baselines.
    Scenarios,
    /// Sweep the entropy weight or the temperature.
    Ablate,
    /// Compare analytic gradients with finite differences.
    Gradcheck,
    /// List every configuration key with its default.
    Keys,
}

fn resolve(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.display().to_string())?;
    }
    match cli.verbose {
        0 => {}
        1 => cfg.set("log_level", "info")?,
        _ => cfg.set("log_level", "debug")?,
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    let level: log::LevelFilter = cfg.get("log_level")?;
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match &cli.command {
        Command::Prep { input } => commands::prep(&cfg, input),
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Scenarios => commands::scenarios(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Keys => {
            print!("{}", keys_help());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmda: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
