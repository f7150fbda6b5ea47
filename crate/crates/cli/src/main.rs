//! `fedsim`: federated LoRA training, evaluation, saliency export and
//! checkpoint inspection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CHECKPOINT: u8 = 3;

impl CliError {
    pub fn usage(message: String) -> Self {
        Self {
            code: EXIT_USAGE,
            message,
        }
    }

    pub fn checkpoint(e: fedsim::Error) -> Self {
        Self {
            code: EXIT_CHECKPOINT,
            message: e.to_string(),
        }
    }

    pub fn from_core(e: fedsim::Error) -> Self {
        use fedsim::Error as E;
        let code = match e {
            E::Config(_) | E::Argument(_) => EXIT_USAGE,
            E::Checkpoint(_) => EXIT_CHECKPOINT,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated LoRA training of a dual-scale vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that read a run configuration.
#[derive(clap::Args, Clone)]
pub struct RunArgs {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use the planted-square synthetic dataset.
    #[arg(long)]
    pub synthetic: bool,
    /// Dataset directory, overriding `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run seed; also reseeds the synthetic dataset.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for checkpoint, history and reports.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Maximum number of federation rounds.
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federation and write checkpoint, history and metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path; defaults to `<output_dir>/eval-<split>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a Grad-CAM++ overlay PNG for one image.
    Gradcam {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: usize,
        /// Fine-branch tap: 0 is the local-window attention output, `i` the
        /// output of block `i - 1`. Defaults to the last block.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic dataset as PNG class directories.
    Synth {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the contents of a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(run) => commands::train(&run),
        Command::Eval {
            run,
            checkpoint,
            split,
            out,
        } => commands::eval(&run, &checkpoint, &split, out.as_deref()),
        Command::Gradcam {
            run,
            checkpoint,
            image,
            class,
            layer,
            out,
        } => commands::gradcam(&run, &checkpoint, &image, class, layer, &out),
        Command::Synth { run, out } => commands::synth(&run, &out),
        Command::InspectCheckpoint { path } => commands::inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
