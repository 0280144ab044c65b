//! Command-line front end: train, eval, gradcheck, and ablate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 verification failure
//! (gradcheck), 64 usage error.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

use commands::EvalArgs;

#[derive(Parser)]
#[command(name = "rgpr", version, about = "Multi-resolution keypoint network: train, evaluate, verify")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a synthetic keypoint dataset and write a checkpoint.
    Train {
        /// key = value config file
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        stages: Option<usize>,
        /// Output directory (checkpoint, metrics, config echo)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump per-epoch attention weights of the first batch
        #[arg(long)]
        dump_attention: bool,
        /// Trailing key=value overrides
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print an AP table for a checkpoint or a prediction document.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Regenerate the synthetic eval set from this seed
        #[arg(long)]
        synthetic_seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Disable flip-averaged inference
        #[arg(long)]
        no_flip: bool,
        /// Uniform OKS falloff constant
        #[arg(long, default_value_t = 0.2)]
        oks_k: f64,
        /// Write the decoded predictions as a JSON document
        #[arg(long)]
        write_predictions: Option<PathBuf>,
        /// Write the ground-truth annotations as a JSON document
        #[arg(long)]
        write_annotations: Option<PathBuf>,
    },
    /// Run finite-difference gradient suites (ops|ram|gpr|full).
    Gradcheck { scope: String },
    /// Train and evaluate the 2x2x2 attention/head/cutout grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run_cmd(cli: Cli) -> rgpr_core::Result<i32> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            epochs,
            width,
            stages,
            out,
            dump_attention,
            overrides,
        } => {
            let mut cfg = commands::load_run_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(w) = width {
                cfg.network.width = w;
            }
            if let Some(s) = stages {
                cfg.network.num_stages = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            commands::cmd_train(&cfg, dump_attention)?;
            Ok(0)
        }
        Cmd::Eval {
            checkpoint,
            annotations,
            predictions,
            synthetic_seed,
            samples,
            no_flip,
            oks_k,
            write_predictions,
            write_annotations,
        } => {
            commands::cmd_eval(&EvalArgs {
                checkpoint,
                annotations,
                predictions,
                synthetic_seed,
                samples,
                no_flip,
                oks_k,
                write_predictions,
                write_annotations,
            })?;
            Ok(0)
        }
        Cmd::Gradcheck { scope } => commands::cmd_gradcheck(&scope),
        Cmd::Ablate {
            config,
            seed,
            epochs,
            out,
            overrides,
        } => {
            let mut cfg = commands::load_run_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            commands::cmd_ablate(&cfg)?;
            Ok(0)
        }
    }
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 64;
        }
    };
    match run_cmd(cli) {
        Ok(code) => code,
        Err(e) => {
            // usage-shaped errors (bad scope, bad flag combination) exit 64
            let usage = matches!(
                &e,
                rgpr_core::Error::Precondition { op, .. }
                    if *op == "gradcheck" || *op == "eval"
            );
            eprintln!("error: {e}");
            if usage {
                64
            } else {
                1
            }
        }
    }
}
