//! `dnasforge`: analyze search spaces, generate latency tables, run
//! searches, and train or evaluate the architectures they produce.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dnasforge", version, about = "Differentiable neural architecture search workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer params, MACs, activations, arithmetic intensity and
    /// (with --lut) latency of an architecture, or the reference table.
    Analyze {
        /// Print the ten typical convolution configurations instead.
        #[arg(long = "table-2-2")]
        table_2_2: bool,
        /// Space definition file.
        #[arg(long)]
        space: Option<PathBuf>,
        /// Run config whose space to analyze.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Architecture file; defaults to the first candidate of every layer.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        lut: Option<PathBuf>,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic latency table covering every block of a space.
    LutGen {
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// analytic_macs or macs_plus_memory.
        #[arg(long, default_value = "analytic_macs")]
        model: String,
        #[arg(long, default_value = "synthetic")]
        device: String,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the search, checkpointing after every epoch, then retrains and
    /// scores the drawn architectures.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lut: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out if there is one.
        #[arg(long)]
        resume: bool,
    },
    /// Draws architectures from the logits stored in a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of draws besides the argmax architecture.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one architecture from fresh weights on the full training data.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lut: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a trained model on the test data of its run config.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lut: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Analyze {
            table_2_2,
            space,
            config,
            arch,
            lut,
            out,
        } => commands::analyze(commands::AnalyzeArgs {
            table_2_2,
            space,
            config,
            arch,
            lut,
            out,
        }),
        Command::LutGen {
            space,
            config,
            model,
            device,
            out,
        } => commands::lut_gen(space, config, &model, &device, &out),
        Command::Search {
            config,
            seed,
            lut,
            out,
            resume,
        } => commands::search(commands::resolved_config(Some(&config), seed, lut)?, &out, resume),
        Command::Sample {
            checkpoint,
            seed,
            count,
            out,
        } => commands::sample(&checkpoint, seed, count, &out),
        Command::Train {
            config,
            arch,
            seed,
            lut,
            out,
        } => commands::train(commands::resolved_config(Some(&config), seed, lut)?, &arch, &out),
        Command::Eval { model, lut, out } => commands::eval(&model, lut, out.as_deref()).map(|_| ()),
    }
}
