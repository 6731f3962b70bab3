mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlt_core::Error;

#[derive(Parser)]
#[command(name = "mlt", about = "Desk-scale mesh reconstruction pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
pub(crate) struct ConfigArgs {
    /// Training config JSON; desk defaults when omitted
    #[arg(long)]
    pub(crate) config: Option<PathBuf>,
    /// Dotted-key override, e.g. --set optim.epochs=3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub(crate) set: Vec<String>,
}

#[derive(clap::Args)]
pub(crate) struct OutArgs {
    /// Artifact root; each run writes under <out>/<command>-<timestamp>/.
    /// The MLT_OUT environment variable overrides this flag.
    #[arg(long, default_value = "runs")]
    pub(crate) out: PathBuf,
}

#[derive(Subcommand)]
pub(crate) enum Command {
    /// Generate a synthetic dataset
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// easy, medium, or hard
        #[arg(long, default_value = "easy")]
        tier: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a fresh model
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Dataset directory produced by gen-data
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint
    Eval {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Continue training from a checkpoint with a fresh schedule
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run one dataset record through a checkpoint
    Infer {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Export the rest-pose body meshes for a config
    ExportObj {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write template and prediction meshes for chosen samples
    SnapshotTemplate {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated record indices
        #[arg(long, default_value = "0,1")]
        ids: String,
    },
    /// Render a CSV log column to an SVG line plot
    Plot {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "total")]
        column: String,
    },
    /// Train once per template-loss weight and tabulate metrics
    SweepAlphaTemp {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0.1,0.2,0.3,0.33,0.4")]
        values: String,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::UnknownPreset(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
