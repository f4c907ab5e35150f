//! `childgrad` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "childgrad",
    version,
    about = "Gradient-masked fine-tuning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated run seeds.
    #[arg(
        long,
        env = "CHILDGRAD_SEED",
        value_delimiter = ',',
        default_value = "0"
    )]
    pub seed: Vec<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
    /// Dotted `key=value` config overrides.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed and write reports, masks, checkpoints and summaries.
    Train(Common),
    /// Write the Fisher diagonal at w0 for each seed.
    Fisher(Common),
    /// Write the first-step mask of the configured method for each seed.
    Mask {
        #[command(flatten)]
        common: Common,
        /// Reuse a saved Fisher diagonal instead of recomputing it.
        #[arg(long)]
        fisher: Option<PathBuf>,
    },
    /// Jaccard overlap matrix of two or more mask files.
    Overlap {
        #[arg(required = true, num_args = 2..)]
        masks: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Update-variance and bound tables.
    Theory(Common),
    /// Top Hessian eigenvalue of the training loss at a checkpoint.
    Sharpness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        iters: usize,
    },
    /// Mean (max) table over run report files or directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write report.txt and report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Fisher(c) => commands::fisher(&c),
        Command::Mask { common, fisher } => commands::mask(&common, fisher.as_deref()),
        Command::Overlap {
            masks,
            out,
            overwrite,
        } => commands::overlap(&masks, &out, overwrite),
        Command::Theory(c) => commands::theory(&c),
        Command::Sharpness {
            common,
            checkpoint,
            iters,
        } => commands::sharpness(&common, &checkpoint, iters),
        Command::Report {
            runs,
            out,
            overwrite,
        } => commands::report(&runs, out.as_deref(), overwrite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
