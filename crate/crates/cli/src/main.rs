//! `foucast`: synthetic data generation, two-phase training, evaluation and
//! reporting.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "foucast", version, about = "Frequency-domain precipitation nowcasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both `[data] seed` and `[train] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded synthetic events and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training phases and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score checkpoints on the test split; one row per checkpoint plus persistence.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Render the evaluation CSVs in a directory as markdown tables.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.data.synth.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = load(&common)?;
            let path = commands::synth(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::Train {
            common,
            manifest,
            out,
            checkpoint,
        } => {
            let cfg = load(&common)?;
            let ck = commands::train(&cfg, manifest.as_deref(), &out, checkpoint.as_deref())?;
            println!("{}", ck.display());
        }
        Command::Eval {
            common,
            manifest,
            checkpoint,
            out,
            oracle,
        } => {
            let cfg = load(&common)?;
            commands::eval(&cfg, manifest.as_deref(), &checkpoint, &out, oracle)?;
            println!("{}", out.display());
        }
        Command::Report { out } => {
            print!("{}", commands::report(Path::new(&out))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
