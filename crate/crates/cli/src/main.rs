//! `tan`: synthetic corpora, two-stage training, alignment inference,
//! pseudo-labelling, evaluation and subtitle curation.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{NoiseFlags, TrainFlags};

#[derive(Debug, Parser)]
#[command(name = "tan", version, about = "Align narration sentences to video timelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic narrated-video corpus (JSON Lines)
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of videos
        #[arg(long)]
        videos: usize,
        /// Generator seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the alignment ground truth of every video
        #[arg(long)]
        gt_out: Option<PathBuf>,
        /// JSON configuration file; flags override it
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        noise: NoiseFlags,
    },
    /// Run stage 1, stage 2 or both and write checkpoints plus a metrics log
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Checkpoint to resume from; required for `--stage 2`
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        /// Output directory for ckpt_s1.ckpt / ckpt_s2.ckpt
        #[arg(long)]
        ckpt_out: Option<PathBuf>,
        /// Metrics log [default: <ckpt-out>/metrics.jsonl]
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Suppress progress lines on stderr
        #[arg(long)]
        quiet: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Full-video alignment matrices and alignability probabilities
    Align {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Inference window in seconds [default: 64]
        #[arg(long)]
        window: Option<usize>,
        /// Use the EMA teacher stored in a stage-2 checkpoint
        #[arg(long)]
        teacher: bool,
        /// Write a time-softmax heat map per video into this directory
        #[arg(long)]
        heatmap_dir: Option<PathBuf>,
        /// Also write PGM images next to the heat-map CSVs
        #[arg(long, requires = "heatmap_dir")]
        pgm: bool,
    },
    /// Pseudo-labels (shifted and updated timestamps, alignability) for a corpus
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction labelled alignable [default: 0.5]
        #[arg(long)]
        alpha: Option<f64>,
        /// Window length in seconds [default: 64]
        #[arg(long)]
        window: Option<usize>,
        /// Use the student even when the checkpoint carries a teacher
        #[arg(long)]
        student: bool,
    },
    /// Score predictions against alignment or segmentation ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Text-to-segment retrieval over the ground-truth segments of a corpus
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Window length in seconds [default: 64]
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ordered action segmentation by DTW decoding
    Segment {
        /// K x T alignment matrix as CSV
        #[arg(long, conflicts_with_all = ["ckpt", "corpus", "actions"])]
        matrix: Option<PathBuf>,
        #[arg(long, requires_all = ["corpus", "actions"])]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// JSON list of {"id", "steps"}; steps are token arrays or text
        #[arg(long)]
        actions: Option<PathBuf>,
        /// Window length in seconds [default: 64]
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curate WebVTT subtitles into timed sentence records
    Curate {
        /// Subtitle files
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Sentence records, one JSON object per line
        #[arg(long)]
        out: PathBuf,
        /// Per-document reports [default: stdout]
        #[arg(long)]
        report: Option<PathBuf>,
        /// Cues sampled for the language check [default: 5]
        #[arg(long)]
        samples: Option<usize>,
        /// Minimum mean English probability [default: 0.9]
        #[arg(long)]
        threshold: Option<f64>,
        /// Seed for cue sampling [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Token vocabulary size for hashed tokens [default: 128]
        #[arg(long)]
        vocab_size: Option<u32>,
    },
    /// Print the default configuration as JSON
    Defaults,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { io::Exit::Usage as u8 } else { 0 });
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
