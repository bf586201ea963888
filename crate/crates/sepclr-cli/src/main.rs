//! Command-line driver: dataset generation, training, evaluation, embedding
//! export, and the experiment matrix.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CmdError;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "sepclr", version, about = "Separation-augmented contrastive audio representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or verify) the synthetic dataset splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Replace an existing dataset that does not match the config.
        #[arg(long)]
        overwrite: bool,
        /// Override single config keys, e.g. --set steps=100.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Train one configuration and evaluate the final checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint: QbE retrieval and downstream classification.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report path (default: <out_dir>/eval_<checkpoint>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Export clip embeddings for one split.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of: train, qbe, ds_train, ds_val, ds_test.
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Run an experiment matrix: every row over the shared seed list.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

fn run() -> Result<(), CmdError> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, overwrite, sets } => {
            let overrides = commands::parse_overrides(&sets)?;
            let config = RunConfig::load(&config, &overrides)?;
            commands::gen_data(&config, overwrite)
        }
        Command::Train { config, sets } => {
            let overrides = commands::parse_overrides(&sets)?;
            let config = RunConfig::load(&config, &overrides)?;
            commands::train(&config).map(|_| ())
        }
        Command::Eval { config, checkpoint, out, sets } => {
            let overrides = commands::parse_overrides(&sets)?;
            let config = RunConfig::load(&config, &overrides)?;
            commands::eval(&config, &checkpoint, out.as_deref())
        }
        Command::Embed { config, checkpoint, split, out, sets } => {
            let overrides = commands::parse_overrides(&sets)?;
            let config = RunConfig::load(&config, &overrides)?;
            commands::embed(&config, &checkpoint, &split, &out)
        }
        Command::Matrix { config, overwrite } => commands::matrix(&config, overwrite),
    }
}

fn main() -> ExitCode {
    sepclr::tune_allocator();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
