//! `scanet`: cohort generation, training, evaluation, cross-validation,
//! gradient verification and attention export.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or data error.

mod commands;
mod error;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{attn_export, cv, eval, gen_data, gradcheck, train};

#[derive(Debug, Parser)]
#[command(name = "scanet", version, about = "Spatial/cross-attention outcome model on dual-modality volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort (SCV1 files plus manifest.json).
    GenData(gen_data::Args),
    /// Train on a cohort and write a checkpoint, history and model card.
    Train(train::Args),
    /// Score a trained checkpoint on a cohort.
    Eval(eval::Args),
    /// Stratified k-fold cross-validation.
    Cv(cv::Args),
    /// Finite-difference check of every differentiable op and the tiny model.
    Gradcheck(gradcheck::Args),
    /// Export SAT maps and CAT slice weights for one study.
    AttnExport(attn_export::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Cv(a) => cv::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::AttnExport(a) => attn_export::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
