//! `aolab`: prepare data, train either method, sample, sweep frontiers, and
//! plot the results.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error, 3
//! runtime/numerics error.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use aolab::model::ModelMode;

use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "aolab",
    version,
    about = "Character-level any-order language modeling: train, sample, evaluate, plot."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Causal decoder over random generation orders.
    Drope,
    /// Masked-denoising encoder baseline.
    Mdlm,
}

impl Method {
    fn mode(self) -> ModelMode {
        match self {
            Method::Drope => ModelMode::DropeDecoder,
            Method::Mdlm => ModelMode::MdlmEncoder,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Method::Drope => "drope",
            Method::Mdlm => "mdlm",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlotKind {
    /// Coherence (y) against diversity (x), one series per method.
    Frontier,
    /// Nats/token (y) against step (x), one series per (objective, seq_len).
    Nll,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a corpus file and write its manifest (length, checksum,
    /// split boundaries).
    PrepareData {
        /// Raw corpus: one line of 'a'-'z' and spaces.
        path: PathBuf,
        /// Accept sizes other than the canonical 100,000,000 bytes.
        #[arg(long)]
        allow_small: bool,
        /// Manifest destination (default: <path>.manifest.toml).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one method from a run config; artifacts land in
    /// <out_dir>/<method>-seq<N>/.
    Train {
        /// Run config TOML.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Override the config's train.seq_len.
        #[arg(long)]
        seq_len: Option<usize>,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps (a checkpoint is written at
        /// the stop point; rerun with --resume to continue).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Generate text from a checkpoint and print one sequence per line.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_samples: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Sequence length (default: the checkpoint's full window).
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Denoising steps (mdlm checkpoints only; default seq_len/4).
        #[arg(long)]
        steps: Option<usize>,
        /// Write the samples to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep temperatures on a checkpoint and write a coherence/diversity
    /// CSV (plus a .toml sidecar recording the resolved sweep).
    Frontier {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lowercase word list, one word per line.
        #[arg(long)]
        wordlist: PathBuf,
        /// Comma-separated temperatures (default: 10 geometric in [0.5, 2]).
        #[arg(long, value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
        /// Generations per temperature.
        #[arg(long, default_value_t = 8)]
        n_samples: usize,
        /// Sequence length (default: the checkpoint's full window).
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Denoising steps per generation (mdlm checkpoints only).
        #[arg(long)]
        mdlm_steps: Option<usize>,
        /// Count every word in the coherence denominator, not only words of
        /// four or more characters.
        #[arg(long)]
        all_words: bool,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Chart one or more CSVs as a self-contained SVG.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// SVG destination.
        #[arg(long)]
        out: PathBuf,
        /// Frontier CSVs (kind frontier) or metric CSVs (kind nll).
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::PrepareData {
            path,
            allow_small,
            out,
        } => commands::prepare_data(&path, allow_small, out),
        Cmd::Train {
            config,
            method,
            seq_len,
            resume,
            stop_after,
        } => commands::train(
            &config,
            method.mode(),
            method.tag(),
            seq_len,
            resume,
            stop_after,
        ),
        Cmd::Sample {
            checkpoint,
            n_samples,
            temperature,
            seq_len,
            seed,
            steps,
            out,
        } => commands::sample(&checkpoint, n_samples, temperature, seq_len, seed, steps, out),
        Cmd::Frontier {
            checkpoint,
            wordlist,
            temperatures,
            n_samples,
            seq_len,
            seed,
            mdlm_steps,
            all_words,
            out,
        } => commands::frontier(
            &checkpoint,
            &wordlist,
            temperatures,
            n_samples,
            seq_len,
            seed,
            mdlm_steps,
            all_words,
            &out,
        ),
        Cmd::Plot { kind, out, csvs } => {
            commands::plot(kind == PlotKind::Frontier, &csvs, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(err.exit_code())
        }
    }
}
