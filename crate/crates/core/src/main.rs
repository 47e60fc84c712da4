//! petcond: simulate, train, denoise, evaluate, and report on
//! count-conditioned PET denoising experiments.
//!
//! Exit codes: 0 success, 2 config error, 3 count-level constraint
//! violation, 4 I/O error, 5 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use petcond::cli::{cmd_denoise, cmd_evaluate, cmd_report, cmd_simulate, cmd_train, Ctx};
use petcond::config::RunConfig;
use petcond::error::Error;

#[derive(Parser)]
#[command(name = "petcond", version, about = "Count-conditioned PET denoising pipeline")]
struct Cli {
    /// Run configuration (TOML). Required by all commands except denoise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override phantom.seed and train.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms and count images at every level; write the
    /// dataset manifest.
    Simulate,
    /// Train the conditional model (or the fixed-pair baseline).
    Train {
        /// Train the plain U-Net baseline (1/100 -> full only, gates
        /// frozen).
        #[arg(long)]
        plain_unet: bool,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise one PTF slice between two count levels.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Input count level, e.g. "1/100".
        #[arg(long)]
        level_in: String,
        /// Output count level, e.g. "full"; must exceed the input level.
        #[arg(long)]
        level_out: String,
        #[arg(long)]
        output: PathBuf,
        /// Optional full-count reference; prints PSNR/SSIM when given.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Compute the per-level metric grid and comparison rows on the test
    /// split.
    Evaluate,
    /// Render the montage PNG, bar-chart CSV, and comparison table.
    Report,
}

fn load_ctx(cli: &Cli) -> Result<Ctx, Error> {
    let path = cli.config.as_ref().ok_or_else(|| {
        Error::Config("this command requires --config PATH".to_string())
    })?;
    let (mut config, config_text) = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    Ok(Ctx {
        config,
        config_text,
        force: cli.force,
    })
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Simulate => cmd_simulate(&load_ctx(cli)?),
        Command::Train { plain_unet, resume } => {
            cmd_train(&load_ctx(cli)?, *plain_unet, resume.as_deref())
        }
        Command::Denoise {
            checkpoint,
            input,
            level_in,
            level_out,
            output,
            reference,
        } => cmd_denoise(
            checkpoint,
            input,
            level_in,
            level_out,
            output,
            reference.as_deref(),
        ),
        Command::Evaluate => cmd_evaluate(&load_ctx(cli)?),
        Command::Report => cmd_report(&load_ctx(cli)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
