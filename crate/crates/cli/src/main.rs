//! `lrlab`: train and analyze low-rank factorized networks.
//!
//! Exit codes: 0 success, 1 invalid input or I/O, 2 numeric failure.

mod commands;
mod sink;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "lrlab", version, about = "Low-rank training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct OutArg {
    /// Output directory (default: $LRLAB_OUT, then the config's output.dir, then ./lrlab-out)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; eligible layers are factorized unless train.low_rank is false
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint (momentum restarts from zero)
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train full-rank, factorize at switch.pretrain_steps, then continue low-rank
    PretrainSwitch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Effective rank of every weight in a checkpoint
    AnalyzeRank {
        #[arg(long)]
        ckpt: PathBuf,
        /// Include unfactorized layers even when factorized ones exist
        #[arg(long)]
        all_layers: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Compare a weight's squared singular values with the Marchenko-Pastur law
    AnalyzeEsd {
        /// Checkpoint holding the layer; omit to draw a Gaussian matrix instead
        #[arg(long, requires = "layer")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        layer: Option<String>,
        /// Entry standard deviation assumed by the MP law
        /// (default: He scale sqrt(2/m) for checkpoints, 1/sqrt(max(rows, cols)) for Gaussian draws)
        #[arg(long)]
        std: Option<f64>,
        #[arg(long, default_value_t = 1000, conflicts_with = "ckpt")]
        rows: usize,
        #[arg(long, default_value_t = 500, conflicts_with = "ckpt")]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Singular-value trajectory of one layer across checkpoints
    AnalyzeSvtraj {
        /// Run directory; its ckpt/*.ckpt files are used
        #[arg(long, conflicts_with = "ckpt")]
        run: Option<PathBuf>,
        /// Explicit checkpoint list
        #[arg(long, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        layer: String,
        #[command(flatten)]
        out: OutArg,
    },
    /// Loss and accuracy along the line between two checkpoints
    Interpolate {
        /// θ_b, the t = 0 endpoint
        #[arg(long)]
        a: PathBuf,
        /// θ_l, the t = 1 endpoint
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        /// Config giving architecture and data (default: config.json beside --a or its parent)
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the built-in invariant checks and print a pass/fail table
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Flop and parameter cost of factorizing a layer or a configured model
    Cost {
        #[arg(long, requires_all = ["n", "r"], conflicts_with = "config")]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        r: Option<usize>,
        /// Treat --m as c_in of a square conv kernel of this size (rows = k·k·c_in)
        #[arg(long, requires = "m")]
        kernel: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config, resume, out } => commands::train(&config, resume.as_deref(), &out, false),
        Command::PretrainSwitch { config, resume, out } => commands::train(&config, resume.as_deref(), &out, true),
        Command::AnalyzeRank { ckpt, all_layers, out } => commands::analyze_rank(&ckpt, all_layers, &out),
        Command::AnalyzeEsd {
            ckpt,
            layer,
            std,
            rows,
            cols,
            seed,
            out,
        } => commands::analyze_esd(ckpt.as_deref(), layer.as_deref(), std, rows, cols, seed, &out),
        Command::AnalyzeSvtraj { run, ckpt, layer, out } => commands::analyze_svtraj(run.as_deref(), &ckpt, &layer, &out),
        Command::Interpolate { a, b, steps, config, out } => {
            commands::interpolate(&a, &b, steps, config.as_deref(), &out)
        }
        Command::Verify { seed } => commands::verify(seed),
        Command::Cost { m, n, r, kernel, config } => commands::cost(m, n, r, kernel, config.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
