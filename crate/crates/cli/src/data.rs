//! Loading the train/test sides described by a run configuration.

use dce_core::dataset::{generate_synthetic, load_dataset, split_by_class, FeatureDataset, SplitRule};

use crate::config::{DataSource, RunConfig};
use crate::error::CliError;

pub struct Sides {
    pub train: FeatureDataset,
    pub test: FeatureDataset,
}

pub fn load_sides(cfg: &RunConfig) -> Result<Sides, CliError> {
    let d = &cfg.data;
    let rule = match &d.train_classes {
        Some(ids) => SplitRule::TrainClasses(ids.clone()),
        None => SplitRule::Fraction(d.split_fraction),
    };
    let (train, test) = match &d.source {
        DataSource::Synthetic => {
            let ds = generate_synthetic(&cfg.synth)?;
            let (a, b, _) = split_by_class(&ds, &rule)?;
            (a, b)
        }
        DataSource::File(p) => {
            let ds = load_dataset(p, d.format, d.csv_header)?;
            let (a, b, _) = split_by_class(&ds, &rule)?;
            (a, b)
        }
        DataSource::Pair { train, test } => (
            load_dataset(train, d.format, d.csv_header)?,
            load_dataset(test, d.format, d.csv_header)?,
        ),
    };
    if train.dim() != test.dim() {
        return Err(CliError::Data(format!(
            "train features have m={} but test features have m={}",
            train.dim(),
            test.dim()
        )));
    }
    let max_k = cfg.eval.ks.iter().copied().max().unwrap_or(0);
    if max_k >= test.len() {
        return Err(CliError::Config(format!(
            "eval.ks asks for k={max_k} but the test side has only {} samples",
            test.len()
        )));
    }
    Ok(Sides { train, test })
}
