mod commands;
mod config;
mod httpgen;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use intentive::error::Result;
use intentive::retrieval::Treatment;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "intentive",
    version,
    about = "Instruction-conditioned retrieval: data synthesis, phased training with \
             pruning and refinement, evaluation, and throughput benchmarks"
)]
struct Cli {
    /// TOML run configuration; omitted keys use desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write instructions/pairs/qrels JSONL files for a run.
    GenData {
        /// Generate via a text-generation endpoint (INTENTIVE_LLM_ENDPOINT)
        /// instead of the deterministic synthesizer.
        #[arg(long)]
        llm: bool,
    },
    /// Run the full multi-phase training pipeline over generated data.
    Train,
    /// Score a checkpoint on the validation split under one instruction
    /// treatment.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// correct | rewrite | remove | incorrect
        #[arg(long)]
        treatment: Treatment,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare query-encoding throughput of two checkpoints that share
    /// a base encoder.
    Bench {
        #[arg(long)]
        checkpoint_a: PathBuf,
        #[arg(long)]
        checkpoint_b: PathBuf,
        /// Number of query encodes per checkpoint (floored at 1000).
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit plot-ready TSV tables from a finished run.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cli.overrides.apply(&mut cfg);
    match cli.command {
        Command::GenData { llm } => commands::cmd_gen_data(&cfg, llm),
        Command::Train => commands::cmd_train(&cfg),
        Command::Eval { checkpoint, treatment, out } => {
            commands::cmd_eval(&cfg, &checkpoint, treatment, out)
        }
        Command::Bench { checkpoint_a, checkpoint_b, queries, out } => {
            commands::cmd_bench(&cfg, &checkpoint_a, &checkpoint_b, queries, out)
        }
        Command::Report => commands::cmd_report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
