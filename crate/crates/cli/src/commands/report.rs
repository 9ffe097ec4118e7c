use std::fs;
use std::path::{Path, PathBuf};

use dce_core::eval::MetricReport;
use dce_core::trainer::{LogRecord, TrainLog};

use super::ablate::AblationReport;
use crate::error::CliError;
use crate::output::{format_recall, RunDir, ABLATION_FILE, METRICS_FILE};

pub struct ReportArgs {
    pub run: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Recall and NMI after each re-clustering, one row per (epoch, k).
pub fn curves_csv(log: &TrainLog) -> String {
    let mut out = String::from("stage,epoch,k,recall,nmi\n");
    for r in &log.records {
        if let LogRecord::Eval {
            epoch,
            stage,
            recall_at,
            nmi,
        } = r
        {
            let stage = serde_json::to_value(stage)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            for (k, v) in recall_at {
                out.push_str(&format!("{stage},{epoch},{k},{v},{nmi}\n"));
            }
        }
    }
    out
}

/// Mean loss of every learner per training epoch, then fine-tuning losses.
pub fn losses_csv(log: &TrainLog) -> String {
    let mut out = String::from("stage,epoch,learner,loss\n");
    for r in &log.records {
        match r {
            LogRecord::Epoch {
                epoch, learner_loss, ..
            } => {
                for (i, l) in learner_loss.iter().enumerate() {
                    if let Some(l) = l {
                        out.push_str(&format!("train,{epoch},{i},{l}\n"));
                    }
                }
            }
            LogRecord::Finetune {
                epoch, loss: Some(l), ..
            } => out.push_str(&format!("finetune,{epoch},merged,{l}\n")),
            _ => {}
        }
    }
    out
}

pub fn reclusters_csv(log: &TrainLog) -> String {
    let mut out = String::from("epoch,total_iou,sizes\n");
    for r in &log.records {
        if let LogRecord::Recluster {
            epoch, sizes, total_iou, ..
        } = r
        {
            let sizes: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
            let iou = total_iou.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{epoch},{iou},{}\n", sizes.join(" ")));
        }
    }
    out
}

pub fn run(args: &ReportArgs) -> Result<(), CliError> {
    let run_dir = RunDir::new(&args.run);
    if !args.run.is_dir() {
        return Err(CliError::Data(format!("{} is not a run directory", args.run.display())));
    }
    let log = match fs::read_to_string(run_dir.train_log()) {
        Ok(text) => Some(
            TrainLog::from_jsonl(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", run_dir.train_log().display())))?,
        ),
        Err(_) => None,
    };
    let metrics: Option<MetricReport> = read_json(&run_dir.reports().join(METRICS_FILE))?;
    let ablation: Option<AblationReport> = read_json(&run_dir.reports().join(ABLATION_FILE))?;
    if log.is_none() && metrics.is_none() && ablation.is_none() {
        return Err(CliError::Data(format!(
            "{} holds no training log, metrics or ablation results",
            args.run.display()
        )));
    }

    let mut summary = format!("# Run {}\n\n", args.run.display());
    fs::create_dir_all(run_dir.reports())?;
    if let Some(log) = &log {
        fs::write(run_dir.reports().join("curves.csv"), curves_csv(log))?;
        fs::write(run_dir.reports().join("losses.csv"), losses_csv(log))?;
        fs::write(run_dir.reports().join("reclusters.csv"), reclusters_csv(log))?;
        let epochs = log
            .records
            .iter()
            .filter(|r| matches!(r, LogRecord::Epoch { .. }))
            .count();
        let finetune = log
            .records
            .iter()
            .filter(|r| matches!(r, LogRecord::Finetune { .. }))
            .count();
        summary.push_str(&format!(
            "## Training\n\n- training epochs: {epochs}\n- fine-tuning epochs: {finetune}\n- re-clustered at epochs: {:?}\n\n",
            log.recluster_epochs()
        ));
    }
    if let Some(m) = &metrics {
        summary.push_str(&format!(
            "## Test metrics\n\n- samples: {}, classes: {}\n- {}\n- NMI: {:.4}\n",
            m.num_samples,
            m.num_classes,
            format_recall(&m.recall_at),
            m.nmi
        ));
        if let Some(v) = m.map_single_query {
            summary.push_str(&format!("- mAP (single query): {v:.4}\n"));
        }
        if let Some(c) = m.learner_correlation {
            summary.push_str(&format!("- mean |correlation| across learners: {c:.4}\n"));
        }
        if let Some(h) = &m.negative_distances {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            summary.push_str(&format!(
                "- mean negative distance: intra-cluster {}, inter-cluster {}\n",
                fmt(h.intra.mean),
                fmt(h.inter.mean)
            ));
        }
        summary.push('\n');
    }
    if let Some(a) = &ablation {
        summary.push_str(&format!(
            "## Ablation (K={}, median over seeds {:?})\n\n```\n{}```\n",
            a.k,
            a.seeds,
            a.to_table()
        ));
    }
    fs::write(run_dir.reports().join("summary.md"), &summary)?;
    print!("{summary}");
    Ok(())
}
