//! `pcg`: synthetic corpus generation, dataset building, training of the
//! segmenter and the audio LM, evaluation and report rendering.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use pcg_core::eval::{EvalDataset, SegMode};

use crate::config::RunConfig;
use crate::run::Usage;

#[derive(Debug, Parser)]
#[command(name = "pcg", version, about = "Phonocardiogram murmur analysis pipeline")]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus under the data root.
    Synth {
        #[arg(long)]
        force: bool,
    },
    /// Split patients and write the train/test question files.
    BuildDataset {
        #[arg(long)]
        force: bool,
    },
    /// Train the segmentation front-end.
    TrainSeg {
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Finetune the audio LM adapters.
    TrainLm {
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Score a dataset and write predictions and metrics.
    Eval {
        /// ns (raw audio) or ws (segmented audio).
        #[arg(long)]
        mode: Option<String>,
        /// circor_test, cinc2016, pascal_a or pascal_b.
        #[arg(long, default_value = "circor_test")]
        dataset: String,
    },
    /// Render all evaluation reports as tables.
    Report,
}

fn usage<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| Usage(e.to_string()).into())
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth { force } => commands::synth::run(&config, force),
        Command::BuildDataset { force } => commands::dataset::run(&config, force),
        Command::TrainSeg { stop_after } => commands::train::train_seg(&config, stop_after),
        Command::TrainLm { stop_after } => commands::train::train_lm(&config, stop_after),
        Command::Eval { mode, dataset } => {
            let mode = match mode {
                Some(m) => usage(m.parse::<SegMode>())?,
                None => config.eval.mode,
            };
            let dataset = usage(dataset.parse::<EvalDataset>())?;
            commands::evaluate::run(&config, mode, dataset)
        }
        Command::Report => commands::evaluate::report(&config),
    }
}

/// 1 usage, 3 numeric failure, 2 anything else (data).
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(pcg_core::Error::Divergence { .. }) = cause.downcast_ref::<pcg_core::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
