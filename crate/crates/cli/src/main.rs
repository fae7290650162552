//! `sagvit`: train, evaluate and inspect the patch-graph vision transformer.
//!
//! Exit codes: 0 success, 1 I/O or file-format failure, 2 invalid
//! configuration, shape mismatch or empty dataset, 3 non-finite loss.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sagvit::model::Ablation;

#[derive(Parser)]
#[command(name = "sagvit", version, about = "Patch-graph vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured ablation variant.
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: sagvit::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a run directory with metrics and checkpoints.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Parent directory of the run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its dataset (or the one in --config).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the dataset section from this configuration instead.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Earlier eval report; its macro F1 is subtracted to give a delta.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// JSON report path.
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
    },
    /// Export graph, attention, correlation and embedding diagnostics for one image.
    Inspect {
        /// Trained parameters; otherwise a freshly initialized model from --config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Index of the image in the dataset.
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long, default_value = "inspect")]
        out: PathBuf,
    },
    /// Scan the loss surface around a checkpoint along two random directions.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Points per axis (odd).
        #[arg(long, default_value_t = 11)]
        grid: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of dataset images the loss is averaged over.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Perturb only parameters with this name prefix.
        #[arg(long)]
        prefix: Option<String>,
        #[arg(long, default_value = "landscape.csv")]
        out: PathBuf,
    },
    /// Write the configured dataset as an SGT directory.
    GenData {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter count and forward FLOPs of the configured model.
    Stats {
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { overrides, out } => commands::train(&overrides, &out),
        Command::Eval {
            checkpoint,
            config,
            baseline,
            out,
        } => commands::eval(&checkpoint, config.as_deref(), baseline.as_deref(), &out),
        Command::Inspect {
            checkpoint,
            overrides,
            image,
            out,
        } => commands::inspect(checkpoint.as_deref(), &overrides, image, &out),
        Command::Landscape {
            checkpoint,
            grid,
            radius,
            seed,
            samples,
            prefix,
            out,
        } => commands::landscape(
            &checkpoint,
            commands::LandscapeArgs {
                grid,
                radius,
                seed,
                samples,
                prefix,
            },
            &out,
        ),
        Command::GenData { overrides, out } => commands::gen_data(&overrides, &out),
        Command::Stats { overrides } => commands::stats(&overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use sagvit::Error;
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Shape { .. } | Error::Contract(_)) => 2,
        Some(Error::NonFinite { .. }) => 3,
        _ => 1,
    }
}
