#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "micse", version, about = "Contrastive sentence embeddings with attention mutual-information regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Run configuration file (`key = value` lines, `#` comments)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file and MICSE_SEED
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder; writes model.ckpt, metrics.tsv and config.echo to output_dir
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Spearman correlation of a checkpoint on one or more STS files
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tab-separated `sentence1 TAB sentence2 TAB score` file; repeat for several (mean is reported)
        #[arg(long = "sts", required = true)]
        sts: Vec<PathBuf>,
        /// Also write `gold TAB cosine` rows sorted by gold score (single STS file only)
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Few-shot grid over variants, corpus fractions and seeds; writes a benchmark table
    Benchmark {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.01, 0.1, 1.0])]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2])]
        seeds: Vec<u64>,
        /// Any of micse, ami-off, moco-off, ami-off-moco-off, positive-only, positive-only-ami
        #[arg(long, value_delimiter = ',', default_values_t = ["micse".to_string(), "ami-off".to_string()])]
        variants: Vec<String>,
        /// Table path (default: <output_dir>/benchmark.tsv)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory of finished cells, reused on rerun (default: <output_dir>/cells)
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Cells trained concurrently
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Per-tile MI table and joint histograms of two passes over one sentence
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = commands::DEMO_SENTENCE)]
        sentence: String,
        /// Both passes without dropout (identical views)
        #[arg(long)]
        eval_mode: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Check the closed-form MI against nonparametric estimators
    Micheck {
        /// Samples per correlation level
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coefficient in front of ln(1 - rho^2); anything but -0.5 should fail
        #[arg(long, default_value_t = -0.5, allow_negative_numbers = true)]
        coefficient: f64,
    },
    /// Write a synthetic corpus and STS file
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        sentences: usize,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the line indices of few-shot corpus subsets, one file per (fraction, seed)
    Subsets {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { cfg } => commands::train(&cfg),
        Command::Eval { checkpoint, sts, scatter } => commands::eval(&checkpoint, &sts, scatter.as_deref()),
        Command::Benchmark { cfg, fractions, seeds, variants, out, cache, jobs } => {
            commands::benchmark(&cfg, &fractions, &seeds, &variants, out, cache, jobs)
        }
        Command::Analyze { checkpoint, sentence, eval_mode, seed, bins, out } => {
            commands::analyze(&checkpoint, &sentence, eval_mode, seed, bins, &out)
        }
        Command::Micheck { n, seed, coefficient } => commands::micheck(n, seed, coefficient),
        Command::Synth { out, sentences, pairs, seed } => commands::synth(&out, sentences, pairs, seed),
        Command::Subsets { corpus, fractions, seeds, out } => commands::subsets(&corpus, &fractions, &seeds, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
