//! Writing run artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use dce_core::eval::{MetricReport, RecallMap};
use serde::Serialize;

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.ck";
pub const FINAL_CHECKPOINT: &str = "final.ck";
pub const LOG_DIR: &str = "logs";
pub const TRAIN_LOG: &str = "trainlog.jsonl";
pub const REPORT_DIR: &str = "reports";
pub const METRICS_FILE: &str = "metrics.json";
pub const ABLATION_FILE: &str = "ablation.json";

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir { root: root.to_path_buf() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoints().join(LATEST_CHECKPOINT)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join(FINAL_CHECKPOINT)
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join(LOG_DIR).join(TRAIN_LOG)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join(REPORT_DIR)
    }

    /// Refuses to reuse a directory that already holds files.
    pub fn ensure_fresh(&self) -> Result<(), CliError> {
        if let Ok(mut entries) = fs::read_dir(&self.root) {
            if entries.next().is_some() {
                return Err(CliError::Config(format!(
                    "output directory {} is not empty; pass --resume or choose another path",
                    self.root.display()
                )));
            }
        }
        Ok(())
    }

    pub fn create(&self) -> Result<(), CliError> {
        for d in [self.checkpoints(), self.root.join(LOG_DIR), self.reports()] {
            fs::create_dir_all(&d)?;
        }
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `k,recall` rows for each map, prefixed by an index column.
pub fn recall_table_csv(index_name: &str, maps: &[RecallMap]) -> String {
    let mut out = format!("{index_name},k,recall\n");
    for (i, m) in maps.iter().enumerate() {
        for (k, v) in m {
            out.push_str(&format!("{},{k},{v}\n", i + 1));
        }
    }
    out
}

/// Writes the metric report and, when requested, the CSV diagnostics.
pub fn write_report(dir: &Path, report: &MetricReport, json: bool, csv: bool) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if json {
        let p = dir.join(METRICS_FILE);
        write_json(&p, report)?;
        written.push(p);
    }
    if csv {
        let mut recall = String::from("k,recall\n");
        for (k, v) in &report.recall_at {
            recall.push_str(&format!("{k},{v}\n"));
        }
        let mut files = vec![("recall.csv", recall)];
        if !report.prefix_recall.is_empty() {
            files.push(("prefix_recall.csv", recall_table_csv("learners", &report.prefix_recall)));
            files.push((
                "per_learner_recall.csv",
                recall_table_csv("learner", &report.per_learner_recall),
            ));
        }
        if let Some(h) = &report.negative_distances {
            files.push(("hist_intra.csv", h.intra.to_csv()));
            files.push(("hist_inter.csv", h.inter.to_csv()));
        }
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text)?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn format_recall(m: &RecallMap) -> String {
    m.iter()
        .map(|(k, v)| format!("R@{k}={v:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}
