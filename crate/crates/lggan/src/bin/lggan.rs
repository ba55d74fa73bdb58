//! Command-line front end: parses arguments, dispatches to [`lggan::cli`],
//! prints one outcome line, and maps errors onto exit codes (1 for bad
//! usage or configuration, 2 for failures during the work).

use clap::{Parser, Subcommand};
use lggan::cli::{
    cmd_evaluate, cmd_generate, cmd_inspect, cmd_train, CliError, EvaluateArgs, GenerateArgs,
    InspectArgs, TrainArgs,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lggan",
    version,
    about = "Layout-to-image scene generation: train, generate, inspect, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Render the fused output image for every layout in a directory.
    Generate {
        /// Checkpoint to load.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input directory holding labels/ (plus cond/ in cross-view mode).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory (default: $LGGAN_OUT_ROOT/generated).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Label id decoded as void.
        #[arg(long, default_value_t = 255)]
        void_id: u8,
    },
    /// Dump every intermediate view of one sample: composites, per-class
    /// images, fusion weight maps, and filtered-feature channel grids.
    Inspect {
        /// Checkpoint to load.
        #[arg(long)]
        ckpt: PathBuf,
        /// Which sample to render.
        #[arg(long)]
        index: usize,
        /// Output directory (default: $LGGAN_OUT_ROOT/inspect).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory to take the sample from; defaults to the
        /// deterministic synthetic scene set implied by the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Label id decoded as void.
        #[arg(long, default_value_t = 255)]
        void_id: u8,
        /// Feature-map channels to tile per class grid.
        #[arg(long, default_value_t = 16)]
        channels: usize,
    },
    /// Score generated images against ground truth and write a report.
    Evaluate {
        /// Checkpoint to load.
        #[arg(long)]
        ckpt: PathBuf,
        /// Paired dataset directory (labels/, images/, cond/ as needed).
        #[arg(long)]
        data: PathBuf,
        /// Report file (default: $LGGAN_OUT_ROOT/evaluation.txt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Label id decoded as void.
        #[arg(long, default_value_t = 255)]
        void_id: u8,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and exit clean; everything
            // else is a usage error.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result: Result<String, CliError> = match cli.command {
        Command::Train { config } => cmd_train(&TrainArgs { config }).map(|o| o.to_string()),
        Command::Generate { ckpt, input, out, void_id } => {
            cmd_generate(&GenerateArgs { ckpt, input, out, void_id }).map(|o| o.to_string())
        }
        Command::Inspect { ckpt, index, out, data, void_id, channels } => {
            cmd_inspect(&InspectArgs { ckpt, index, out, data, void_id, channels })
                .map(|o| o.to_string())
        }
        Command::Evaluate { ckpt, data, out, void_id } => {
            cmd_evaluate(&EvaluateArgs { ckpt, data, out, void_id }).map(|o| o.to_string())
        }
    };
    match result {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
