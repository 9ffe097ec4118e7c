use std::path::PathBuf;

use dce_core::checkpoint::load_checkpoint;
use dce_core::dataset::{load_dataset, split_by_class, FileFormat, SplitRule};
use dce_core::eval::EvalOptions;

use super::evaluate_model;
use crate::error::CliError;
use crate::output::{format_recall, write_report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Side {
    All,
    Train,
    Test,
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub format: FileFormat,
    pub csv_header: bool,
    pub side: Side,
    pub split_fraction: f64,
    pub ks: Vec<usize>,
    pub diagnostics: bool,
    pub map: bool,
    pub out: Option<PathBuf>,
}

pub fn run(args: &EvalArgs, seed: Option<u64>) -> Result<(), CliError> {
    if args.ks.is_empty() || args.ks.contains(&0) {
        return Err(CliError::Config("--ks must list positive integers".into()));
    }
    if !args.checkpoint.exists() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let state = load_checkpoint(&args.checkpoint)?;
    let full = load_dataset(&args.data, args.format, args.csv_header)?;
    let ds = match args.side {
        Side::All => full,
        side => {
            let (train, test, _) = split_by_class(&full, &SplitRule::Fraction(args.split_fraction))?;
            if side == Side::Train {
                train
            } else {
                test
            }
        }
    };
    let m = state.model.input_dim();
    if ds.dim() != m {
        return Err(CliError::Data(format!(
            "checkpoint expects m={m} input features but {} has m={}",
            args.data.display(),
            ds.dim()
        )));
    }
    let max_k = args.ks.iter().copied().max().unwrap_or(0);
    if max_k >= ds.len() {
        return Err(CliError::Config(format!(
            "--ks asks for k={max_k} but the evaluated data has only {} samples",
            ds.len()
        )));
    }
    let opts = EvalOptions {
        ks: args.ks.clone(),
        map: args.map,
        diagnostics: args.diagnostics,
        seed: seed.unwrap_or(state.config.seed),
        kmeans_max_iters: state.config.kmeans_max_iters,
    };
    let report = evaluate_model(&state.model, state.config.k, &ds, &opts)?;
    match &args.out {
        Some(dir) => {
            write_report(dir, &report, true, args.diagnostics)?;
            println!("{} NMI={:.4} (written to {})", format_recall(&report.recall_at), report.nmi, dir.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
