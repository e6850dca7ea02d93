use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use prnet_core::pipeline::{self, Engine, PipelineError};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "prnet",
    version,
    about = "Pseudorange bias correction pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace (epochs, truth and truth sidecar).
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a localization engine and write a track.
    Solve {
        #[arg(long, value_parser = parse_engine)]
        engine: Engine,
        #[arg(long)]
        epochs: PathBuf,
        /// Estimator settings (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce smoothed bias labels and h-rows.
    Label {
        #[arg(long)]
        epochs: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Estimator settings for the smoother (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Leading epochs to drop while the smoother converges.
        #[arg(long)]
        discard: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract per-satellite input features.
    Features {
        #[arg(long)]
        epochs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network; the loss curve is written next to the model.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed in the training config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subtract predicted biases from the pseudoranges.
    Correct {
        #[arg(long)]
        epochs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a track against ground truth.
    Evaluate {
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    s.parse().map_err(|e: PipelineError| e.to_string())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate { .. } => "simulate",
        Command::Solve { .. } => "solve",
        Command::Label { .. } => "label",
        Command::Features { .. } => "features",
        Command::Train { .. } => "train",
        Command::Correct { .. } => "correct",
        Command::Evaluate { .. } => "evaluate",
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Simulate { config, out, seed } => pipeline::simulate_stage(&config, &out, seed),
        Command::Solve {
            engine,
            epochs,
            config,
            out,
        } => pipeline::solve_stage(engine, &epochs, config.as_deref(), &out),
        Command::Label {
            epochs,
            truth,
            config,
            discard,
            out,
        } => pipeline::label_stage(&epochs, &truth, config.as_deref(), discard, &out),
        Command::Features { epochs, out } => pipeline::features_stage(&epochs, &out),
        Command::Train {
            features,
            labels,
            config,
            seed,
            out,
        } => pipeline::train_stage(&features, &labels, config.as_deref(), seed, &out),
        Command::Correct { epochs, model, out } => pipeline::correct_stage(&epochs, &model, &out),
        Command::Evaluate { track, truth, out } => {
            let r = pipeline::evaluate_stage(&track, &truth, &out)?;
            println!(
                "{}",
                json!({"epochs": r.epochs, "p50_m": r.p50_m, "p95_m": r.p95_m, "score_m": r.score_m})
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!(
                "{}",
                json!({"error": {"kind": "usage", "message": message.trim_end()}})
            );
            return ExitCode::from(2);
        }
    };
    let name = command_name(&cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"command": name, "kind": e.kind(), "message": e.to_string()}})
            );
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
