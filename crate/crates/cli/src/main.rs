//! `framesel` command-line entry point.
//!
//! Exit status: 0 on success, 1 on a domain error, 2 on a configuration or
//! usage error.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "framesel", version, about = "Question-aware video frame selection")]
pub struct Cli {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Uniform candidate plans for a video-meta file.
    Plan {
        #[arg(long)]
        videos: PathBuf,
        /// Candidates per video.
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame spatial pseudo-labels.
    LabelSpatial {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame captions for the temporal labeler.
    Caption {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Temporal pseudo-labels from captions.
    LabelTemporal {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Averages spatial and temporal labels.
    Fuse {
        #[arg(long)]
        spatial: PathBuf,
        #[arg(long)]
        temporal: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one stage and writes a checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Checkpoint to start from; required for stage 2.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Picks k frames per task from scores or a trained selector.
    Select {
        #[arg(long, conflicts_with_all = ["checkpoint", "dataset"])]
        scores: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        selection: SelectionArgs,
        /// Also write the selector's scores here.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hit rate, recall and modeled accuracy of a scorer and policy.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        /// Record mean wall-clock time per task (makes output non-reproducible).
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hit rate at fixed k over candidate pool sizes on shared timelines.
    Sweep {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 128])]
        pools: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a synthetic planted-key dataset.
    GenSynthetic {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// SVG plots and a text summary of eval, sweep, selection and loss files.
    Report {
        #[arg(long)]
        eval: Vec<PathBuf>,
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        selections: Option<PathBuf>,
        #[arg(long)]
        train_log: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SelectionArgs {
    /// Defaults to the configured k.
    #[arg(long)]
    pub k: Option<usize>,
    /// nms-greedy, topk, uniform or random; defaults to the configured policy.
    #[arg(long)]
    pub policy: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerKind {
    Oracle,
    Random,
    Constant,
    ClipSim,
    Selector,
    Labels,
}

#[derive(Debug, Clone, Args)]
pub struct ScorerArgs {
    #[arg(long, value_enum, default_value_t = ScorerKind::Oracle)]
    pub scorer: ScorerKind,
    /// Selector checkpoint for `--scorer selector`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pseudo-label file for `--scorer labels`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
