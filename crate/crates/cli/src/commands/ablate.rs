use std::fs;
use std::path::PathBuf;

use dce_core::eval::{EvalOptions, RecallMap};
use dce_core::trainer::{init_model, mean_recall, PartitionMode, Trainer, Variant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evaluate_model;
use crate::config::{ReportFormat, RunConfig};
use crate::data::load_sides;
use crate::error::CliError;
use crate::output::{write_json, RunDir, ABLATION_FILE, CONFIG_FILE};

pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub recall_at: RecallMap,
    pub learner_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub partition_mode: PartitionMode,
    pub split_embedding: bool,
    pub learners: usize,
    pub median_recall_at: RecallMap,
    pub mean_recall_at: RecallMap,
    pub median_correlation: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub k: usize,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for k in &self.ks {
            out.push_str(&format!(",recall_at_{k}"));
        }
        out.push_str(",correlation\n");
        for r in &self.rows {
            out.push_str(&r.variant);
            for k in &self.ks {
                out.push_str(&format!(",{}", r.median_recall_at[k]));
            }
            match r.median_correlation {
                Some(c) => out.push_str(&format!(",{c}\n")),
                None => out.push_str(",\n"),
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<18}", "variant");
        for k in &self.ks {
            out.push_str(&format!(" {:>8}", format!("R@{k}")));
        }
        out.push_str(&format!(" {:>8}\n", "corr"));
        for r in &self.rows {
            out.push_str(&format!("{:<18}", r.variant));
            for k in &self.ks {
                out.push_str(&format!(" {:>8.4}", r.median_recall_at[k]));
            }
            match r.median_correlation {
                Some(c) => out.push_str(&format!(" {c:>8.4}\n")),
                None => out.push_str(&format!(" {:>8}\n", "-")),
            }
        }
        out
    }
}

pub fn run(args: &AblateArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.set, seed)?;
    if let Some(s) = &args.seeds {
        if s.is_empty() {
            return Err(CliError::Config("--seeds must not be empty".into()));
        }
        cfg.ablate_seeds = s.clone();
        cfg.resolved = cfg.snapshot();
    }
    let root = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output.dir".into()))?;
    let run_dir = RunDir::new(&root);
    run_dir.ensure_fresh()?;
    for v in Variant::ALL {
        v.configure(&cfg.train).validate()?;
    }
    // Each seed drives both the training run and, for synthetic data, the generator.
    let sides = cfg
        .ablate_seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.synth.seed = s;
            load_sides(&c)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let jobs: Vec<(usize, Variant)> = (0..sides.len())
        .flat_map(|i| Variant::ALL.into_iter().map(move |v| (i, v)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, variant)| -> Result<SeedResult, CliError> {
            let seed = cfg.ablate_seeds[i];
            let data = &sides[i];
            let mut tc = variant.configure(&cfg.train);
            tc.seed = seed;
            tc.eval_during_training = false;
            let model = init_model(&tc, data.train.dim())?;
            let mut trainer = Trainer::new(&data.train, None, model, tc.clone())?;
            trainer.run()?;
            let state = trainer.into_state();
            let opts = EvalOptions {
                ks: cfg.eval.ks.clone(),
                map: false,
                diagnostics: true,
                seed,
                kmeans_max_iters: tc.kmeans_max_iters,
            };
            let report = evaluate_model(&state.model, cfg.train.k, &data.test, &opts)?;
            log::info!("seed {seed} {}: done", variant.name());
            Ok(SeedResult {
                seed,
                recall_at: report.recall_at,
                learner_correlation: report.learner_correlation,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let rows = Variant::ALL
        .iter()
        .map(|&variant| {
            let per_seed: Vec<SeedResult> = jobs
                .iter()
                .zip(&results)
                .filter(|((_, v), _)| *v == variant)
                .map(|(_, r)| r.clone())
                .collect();
            let maps: Vec<RecallMap> = per_seed.iter().map(|r| r.recall_at.clone()).collect();
            let median_recall_at = cfg
                .eval
                .ks
                .iter()
                .map(|k| (*k, median(maps.iter().map(|m| m[k]).collect()).unwrap_or(f64::NAN)))
                .collect();
            let median_correlation = median(per_seed.iter().filter_map(|r| r.learner_correlation).collect());
            let vc = variant.configure(&cfg.train);
            AblationRow {
                variant: variant.name().to_string(),
                partition_mode: vc.partition_mode,
                split_embedding: vc.split_embedding,
                learners: vc.learners(),
                median_recall_at,
                mean_recall_at: mean_recall(&maps),
                median_correlation,
                per_seed,
            }
        })
        .collect();
    let report = AblationReport {
        k: cfg.train.k,
        ks: cfg.eval.ks.clone(),
        seeds: cfg.ablate_seeds.clone(),
        rows,
    };

    fs::create_dir_all(run_dir.reports())?;
    fs::write(root.join(CONFIG_FILE), cfg.snapshot_toml())?;
    write_json(&run_dir.reports().join(ABLATION_FILE), &report)?;
    if cfg.wants(ReportFormat::Csv) {
        fs::write(run_dir.reports().join("ablation.csv"), report.to_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::median;

    #[test]
    fn median_of_odd_and_even_lengths() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
