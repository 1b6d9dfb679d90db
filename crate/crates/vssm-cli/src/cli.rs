//! Command-line surface.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "vssm",
    about = "Variational state-space sequence model: train, sample, eval, bench",
    version
)]
pub struct Cli {
    /// TOML configuration file; CLI flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Size/schedule preset: desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    pub profile: String,

    /// Output directory.
    #[arg(long, global = true, default_value = "runs/out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus per-epoch metrics.
    Train {
        /// Dataset: an IDX image file, a directory of CIFAR-10 .bin
        /// batches, or "digits[:count]" for the synthetic digit set.
        #[arg(long)]
        dataset: String,

        /// Architecture: vssm or baseline.
        #[arg(long, default_value = "vssm")]
        arch: String,

        /// Worker threads for batch evaluation.
        #[arg(long)]
        threads: Option<usize>,

        #[arg(long)]
        epochs: Option<usize>,

        #[arg(long)]
        batch_size: Option<usize>,

        /// Learning rate; may repeat to form a grid.
        #[arg(long)]
        lr: Vec<f64>,

        #[arg(long)]
        lambda: Option<f64>,

        #[arg(long)]
        max_items: Option<usize>,

        /// Resume from a state_epoch_*.vsst file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },

    /// Generate sequences and an image grid from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,

        /// Optional prompt source (same forms as for train); prompts are
        /// cut to --cut rows. Without it every sample is unconditional.
        #[arg(long)]
        dataset: Option<String>,

        /// Prompt length C.
        #[arg(long, default_value_t = 0)]
        cut: usize,

        /// Sequence length T (defaults to the checkpoint's).
        #[arg(long)]
        length: Option<usize>,

        /// Chunk width W; widths below T - C take the resumable path.
        #[arg(long)]
        chunk: Option<usize>,

        /// Number of sequences.
        #[arg(long, default_value_t = 9)]
        samples: usize,

        /// Emit Gaussian means instead of sampled observations.
        #[arg(long, default_value_t = false)]
        mean_only: bool,
    },

    /// Importance-sampled likelihood report over a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,

        #[arg(long)]
        dataset: String,

        /// Importance samples per sequence.
        #[arg(long, default_value_t = 100)]
        k: usize,

        /// Comma-separated prompt cuts for partial likelihood
        /// (default: T/2).
        #[arg(long)]
        cuts: Option<String>,

        /// Cap on evaluated sequences (0 = all).
        #[arg(long, default_value_t = 256)]
        limit: usize,
    },

    /// Generation-latency comparison: one-shot, chunked, and the
    /// sequential baseline.
    Bench {
        /// VSSM checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,

        /// Baseline checkpoint.
        #[arg(long)]
        baseline: PathBuf,

        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "64,256,1024")]
        lengths: String,

        /// Prompt length C.
        #[arg(long, default_value_t = 8)]
        cut: usize,

        /// Comma-separated chunk widths for the resumable path.
        #[arg(long, default_value = "16,128")]
        chunks: String,

        /// Timed repetitions per point (3 warm-ups are not counted).
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad integer '{p}'"))
        })
        .collect()
}
