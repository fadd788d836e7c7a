//! Command-line entry point.
//!
//! Settings come from defaults, then an optional TOML file (`--config`), then
//! flags; a flag always wins. Every artifact-producing command writes
//! `manifest.json` into its output directory before doing any work.

mod commands;
mod config;
mod report;

pub use config::{to_sorted_json, Overrides, RunManifest, Settings};
pub use report::{table1, table2, table3, SummaryRow, Table1, Table2, Table3, Table3Row};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::metrics::DecisionRule;
use crate::model::{Modality, TabularMode};

#[derive(Debug, Parser)]
#[command(name = "perceiver-triage", version, about = "Multimodal triage diagnosis prediction")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML settings file with [model], [train], [data] and [synth] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for splits, initialization, batch order and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel runs and prediction.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct ModelArgs {
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long)]
    tabular_mode: Option<TabularMode>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of most frequent categories kept as labels.
    #[arg(long)]
    top_k: Option<usize>,
    /// Decision rule for precision, recall and F1.
    #[arg(long)]
    rule: Option<DecisionRule>,
    /// Fourier position channels on text tokens.
    #[arg(long)]
    text_pe: Option<Switch>,
    /// Share block weights from the second repeat onward.
    #[arg(long)]
    weight_sharing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus in the ED CSV layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples_per_class: Option<usize>,
    },
    /// Train one model on a corpus directory and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate a checkpoint on a corpus directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding vocab.json, labels.json and stats.json; defaults to the checkpoint's.
        #[arg(long)]
        artifacts: Option<PathBuf>,
        /// Score every visit instead of the held-out split recorded at training time.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        rule: Option<DecisionRule>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated-run modality and tabular-encoding ablations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Export a cross-attention heatmap, averaged or for one visit.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        /// Block to export; defaults to the last.
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        visit_id: Option<String>,
    },
    /// Finite-difference gradient check of the tiny configuration.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a corpus, then run the full ablation on it.
    Repro {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 invalid input, 2 runtime failure.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            e.exit_code()
        }
    }
}
