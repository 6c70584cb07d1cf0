//! Command-line front end: `synth`, `train`, `eval`, `map` and `ablate`.

pub mod ablate;
pub mod args;
pub mod commands;
pub mod pipeline;
pub mod table;

use clap::{Parser, Subcommand};

pub use args::{AblateArgs, EvalArgs, MapArgs, RunArgs, RunConfig, SynthArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "sdhsi", version, about = "Self-distilled spectral-spatial hyperspectral classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene container.
    Synth(SynthArgs),
    /// Fit PCA, split, train and write a checkpoint.
    Train(TrainArgs),
    /// Per-head OA / AA / kappa of a checkpoint on a scene.
    Eval(EvalArgs),
    /// Ground-truth and per-head classification maps as PPM images.
    Map(MapArgs),
    /// Paired or grid experiments: sd, triplet, splits, patch.
    Ablate(AblateArgs),
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Map(a) => commands::map(&a),
        Command::Ablate(a) => ablate::ablate(&a),
    }
}

/// Stable category of an error, taken from the innermost library error if any.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<sdhsi::Error>())
        .map_or("cli", sdhsi::Error::kind)
}

/// The one-line message written to stderr on failure.
pub fn error_line(err: &anyhow::Error) -> String {
    let chain: Vec<String> = err.chain().map(ToString::to_string).collect();
    format!("sdhsi: error[{}]: {}", error_kind(err), chain.join(": "))
}
