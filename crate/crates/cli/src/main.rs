mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dadee_core::experiment::ExperimentConfig;
use dadee_core::Error;

use commands::Context;

/// Multi-exit encoders with adversarial domain adaptation and early-exit inference.
#[derive(Parser)]
#[command(name = "dadee", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a multi-exit source encoder for every configured seed.
    TrainSource(Common),
    /// Adapt source-trained checkpoints to the target domain.
    Adapt(Common),
    /// Write per-seed reports and a multi-seed summary.
    Evaluate(Common),
    /// Target-test accuracy and speedup at every threshold of the search space.
    SweepAlpha(Common),
    /// Pooled features of the source and target test splits at one layer.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        /// 1-based layer; defaults to the config's probe layer.
        #[arg(long)]
        layer: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Input checkpoint; repeatable. Without it, checkpoints are looked up
    /// by seed in the output directory.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig { .. } | Error::InvalidInput(_) | Error::Parse { .. } | Error::Io { .. } | Error::Checkpoint(_) => 2,
        Error::NonFinite(_) | Error::Shape { .. } | Error::State(_) => 3,
    }
}

fn run(cli: Cli) -> dadee_core::Result<()> {
    let (common, layer) = match &cli.command {
        Command::TrainSource(c) | Command::Adapt(c) | Command::Evaluate(c) | Command::SweepAlpha(c) => (c, None),
        Command::ExportFeatures { common, layer } => (common, *layer),
    };
    let config = ExperimentConfig::load(&common.config)?;
    let ctx = Context {
        out: common.out.clone().unwrap_or_else(|| config.output_dir.clone()),
        checkpoints: common.checkpoint.clone(),
        config,
    };
    match cli.command {
        Command::TrainSource(_) => commands::train_source(&ctx),
        Command::Adapt(_) => commands::adapt(&ctx),
        Command::Evaluate(_) => commands::evaluate(&ctx),
        Command::SweepAlpha(_) => commands::sweep_alpha(&ctx),
        Command::ExportFeatures { .. } => commands::export(&ctx, layer),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
