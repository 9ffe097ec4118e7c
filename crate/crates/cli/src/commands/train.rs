use std::fs;
use std::path::PathBuf;

use dce_core::checkpoint::{load_checkpoint, save_checkpoint};
use dce_core::eval::EvalOptions;
use dce_core::trainer::{init_model, Stage, TrainState, Trainer};

use super::evaluate_model;
use crate::config::{ReportFormat, RunConfig};
use crate::data::load_sides;
use crate::error::CliError;
use crate::output::{format_recall, write_report, RunDir, CONFIG_FILE};

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub out: Option<PathBuf>,
    pub resume: bool,
    pub stop_after_epoch: Option<usize>,
}

/// Epochs completed so far across both stages.
fn completed_epochs(state: &TrainState) -> usize {
    match state.stage {
        Stage::Train => state.epoch,
        Stage::Finetune => state.config.epochs + state.epoch,
        Stage::Done => state.config.epochs + state.config.finetune_epochs,
    }
}

pub fn run(args: &TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.set, seed)?;
    let root = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output.dir".into()))?;
    let run_dir = RunDir::new(&root);
    let sides = load_sides(&cfg)?;
    let test_for_log = cfg.train.eval_during_training.then_some(&sides.test);

    let mut trainer = if args.resume {
        let ck = run_dir.latest_checkpoint();
        if !ck.exists() {
            return Err(CliError::Data(format!("nothing to resume: {} does not exist", ck.display())));
        }
        let state = load_checkpoint(&ck)?;
        state.check_compatible(&cfg.train, &sides.train)?;
        if state.config != cfg.train {
            return Err(CliError::Config(format!(
                "the configuration differs from the one stored in {}; resume needs identical settings",
                ck.display()
            )));
        }
        Trainer::resume(&sides.train, test_for_log, state)?
    } else {
        run_dir.ensure_fresh()?;
        let model = init_model(&cfg.train, sides.train.dim())?;
        Trainer::new(&sides.train, test_for_log, model, cfg.train.clone())?
    };

    run_dir.create()?;
    fs::write(root.join(CONFIG_FILE), cfg.snapshot_toml())?;

    let write_log = |state: &TrainState| -> Result<(), CliError> {
        fs::write(run_dir.train_log(), state.log.to_jsonl()?)?;
        Ok(())
    };
    write_log(trainer.state())?;
    while trainer.run_epoch()? {
        let state = trainer.state();
        save_checkpoint(state, &run_dir.latest_checkpoint())?;
        write_log(state)?;
        let done = completed_epochs(state);
        log::info!("epoch {done} complete ({:?})", state.stage);
        if args.stop_after_epoch.is_some_and(|n| done >= n) {
            println!(
                "stopped after epoch {done}; continue with --resume (checkpoint {})",
                run_dir.latest_checkpoint().display()
            );
            return Ok(());
        }
    }
    let state = trainer.into_state();
    save_checkpoint(&state, &run_dir.latest_checkpoint())?;
    save_checkpoint(&state, &run_dir.final_checkpoint())?;
    write_log(&state)?;

    let opts = EvalOptions {
        ks: cfg.eval.ks.clone(),
        map: cfg.eval.map,
        diagnostics: cfg.eval.diagnostics,
        seed: cfg.train.seed,
        kmeans_max_iters: cfg.train.kmeans_max_iters,
    };
    let report = evaluate_model(&state.model, cfg.train.k, &sides.test, &opts)?;
    write_report(
        &run_dir.reports(),
        &report,
        cfg.wants(ReportFormat::Json),
        cfg.wants(ReportFormat::Csv),
    )?;
    println!(
        "trained {} epochs + {} fine-tuning epochs; test {} NMI={:.4}",
        cfg.train.epochs,
        cfg.train.finetune_epochs,
        format_recall(&report.recall_at),
        report.nmi
    );
    Ok(())
}
