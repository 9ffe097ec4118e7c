//! Run configuration: a TOML file of flat dotted keys plus `--set`
//! overrides, resolved onto typed defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dce_core::dataset::{FileFormat, SynthSpec};
use dce_core::losses::{BetaMode, LossKind};
use dce_core::sampling::{BatchStrategy, Miner};
use dce_core::trainer::{PartitionMode, TrainConfig};
use toml::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// One file, split by class.
    File(PathBuf),
    /// Pre-split train and test files.
    Pair { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub format: FileFormat,
    pub csv_header: bool,
    /// Fraction of classes (lowest ids first) used for training.
    pub split_fraction: f64,
    /// Explicit training class ids; overrides `split_fraction`.
    pub train_classes: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub diagnostics: bool,
    pub map: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub output_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub report_formats: Vec<ReportFormat>,
    pub ablate_seeds: Vec<u64>,
    /// Resolved flat key/value view, written as the run's config snapshot.
    pub resolved: BTreeMap<String, Value>,
}

/// Flattens nested tables into dotted keys.
fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses `key=value`; the value is read as TOML, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {s:?}")))?;
    let k = k.trim().to_string();
    if k.is_empty() {
        return Err(CliError::Config(format!("--set has an empty key in {s:?}")));
    }
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k, value))
}

pub fn read_flat(path: &Path) -> Result<BTreeMap<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut flat = BTreeMap::new();
    flatten("", &table, &mut flat);
    Ok(flat)
}

fn type_err(key: &str, want: &str, v: &Value) -> CliError {
    CliError::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_usize(key: &str, v: &Value) -> Result<usize, CliError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(type_err(key, "a non-negative integer", v)),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64, CliError> {
    as_usize(key, v).map(|x| x as u64)
}

fn as_f64(key: &str, v: &Value) -> Result<f64, CliError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(key, "a number", v)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool, CliError> {
    v.as_bool().ok_or_else(|| type_err(key, "true or false", v))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str, CliError> {
    v.as_str().ok_or_else(|| type_err(key, "a string", v))
}

fn as_list<T>(key: &str, v: &Value, f: impl Fn(&str, &Value) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    match v {
        Value::Array(a) => a.iter().map(|x| f(key, x)).collect(),
        _ => Err(type_err(key, "an array", v)),
    }
}

fn choice<T: Copy>(key: &str, v: &Value, options: &[(&str, T)]) -> Result<T, CliError> {
    let s = as_str(key, v)?;
    options
        .iter()
        .find(|(name, _)| *name == s)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|o| o.0).collect();
            CliError::Config(format!("{key}: unknown value {s:?}, expected one of {names:?}"))
        })
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig {
                source: DataSource::Synthetic,
                format: FileFormat::Binary,
                csv_header: true,
                split_fraction: 0.5,
                train_classes: None,
            },
            synth: SynthSpec::default(),
            output_dir: None,
            train: TrainConfig::default(),
            eval: EvalConfig {
                ks: vec![1, 2, 4, 8],
                diagnostics: true,
                map: false,
            },
            report_formats: vec![ReportFormat::Json, ReportFormat::Csv],
            ablate_seeds: vec![0, 1, 2, 3, 4],
            resolved: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Applies `flat` (file keys, then overrides) on top of the defaults and
    /// validates the result. Every error names the offending key.
    pub fn from_flat(flat: &BTreeMap<String, Value>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        let mut data_path = None;
        let mut data_train = None;
        let mut data_test = None;
        let mut source = None;
        let mut finetune_set = false;
        for (key, v) in flat {
            let k = key.as_str();
            match k {
                "seed" => {
                    let s = as_u64(k, v)?;
                    c.train.seed = s;
                    c.synth.seed = s;
                }
                "data.source" => source = Some(choice(k, v, &[("synthetic", 0), ("file", 1)])?),
                "data.path" => data_path = Some(PathBuf::from(as_str(k, v)?)),
                "data.train" => data_train = Some(PathBuf::from(as_str(k, v)?)),
                "data.test" => data_test = Some(PathBuf::from(as_str(k, v)?)),
                "data.format" => {
                    c.data.format = choice(k, v, &[("binary", FileFormat::Binary), ("csv", FileFormat::Csv)])?
                }
                "data.csv_header" => c.data.csv_header = as_bool(k, v)?,
                "data.split_fraction" => c.data.split_fraction = as_f64(k, v)?,
                "data.train_classes" => {
                    c.data.train_classes = Some(as_list(k, v, |k, x| as_u64(k, x).map(|i| i as u32))?)
                }
                "synth.num_modes" => c.synth.num_modes = as_usize(k, v)?,
                "synth.classes_per_mode" => c.synth.classes_per_mode = as_usize(k, v)?,
                "synth.samples_per_class" => c.synth.samples_per_class = as_usize(k, v)?,
                "synth.feature_dim" => c.synth.feature_dim = as_usize(k, v)?,
                "synth.mode_separation" => c.synth.mode_separation = as_f64(k, v)?,
                "synth.class_spread" => c.synth.class_spread = as_f64(k, v)?,
                "synth.noise_sigma" => c.synth.noise_sigma = as_f64(k, v)?,
                "output.dir" => c.output_dir = Some(PathBuf::from(as_str(k, v)?)),
                "train.k" => c.train.k = as_usize(k, v)?,
                "train.recluster_every" => c.train.recluster_every = as_usize(k, v)?,
                "train.epochs" => c.train.epochs = as_usize(k, v)?,
                "train.finetune_epochs" => {
                    c.train.finetune_epochs = as_usize(k, v)?;
                    finetune_set = true;
                }
                "train.dim" => c.train.dim = as_usize(k, v)?,
                "train.adapter_hidden" => {
                    let h = as_usize(k, v)?;
                    c.train.adapter_hidden = (h > 0).then_some(h);
                }
                "train.lr" => c.train.lr = as_f64(k, v)?,
                "train.finetune_lr" => c.train.finetune_lr = as_f64(k, v)?,
                "train.partition_mode" => {
                    c.train.partition_mode = choice(
                        k,
                        v,
                        &[
                            ("kmeans", PartitionMode::Kmeans),
                            ("random", PartitionMode::Random),
                            ("labels", PartitionMode::Labels),
                            ("none", PartitionMode::None),
                        ],
                    )?
                }
                "train.split_embedding" => c.train.split_embedding = as_bool(k, v)?,
                "train.kmeans_max_iters" => c.train.kmeans_max_iters = as_usize(k, v)?,
                "train.group_map" => c.train.group_map = Some(as_list(k, v, as_usize)?),
                "train.eval_during_training" => c.train.eval_during_training = as_bool(k, v)?,
                "loss.kind" => {
                    c.train.loss.kind = choice(
                        k,
                        v,
                        &[
                            ("triplet", LossKind::Triplet),
                            ("margin", LossKind::Margin),
                            ("proxy_nca", LossKind::ProxyNca),
                        ],
                    )?
                }
                "loss.alpha" => c.train.loss.alpha = as_f64(k, v)?,
                "loss.beta_init" => c.train.loss.beta_init = as_f64(k, v)?,
                "loss.beta_lr" => c.train.loss.beta_lr = as_f64(k, v)?,
                "loss.beta_mode" => {
                    c.train.loss.beta_mode =
                        choice(k, v, &[("learner", BetaMode::Learner), ("class", BetaMode::Class)])?
                }
                "loss.proxy_lr" => c.train.loss.proxy_lr = as_f64(k, v)?,
                "batch.size" => c.train.batch.batch_size = as_usize(k, v)?,
                "batch.per_class" => c.train.batch.per_class = as_usize(k, v)?,
                "batch.strategy" => {
                    c.train.batch.strategy = choice(
                        k,
                        v,
                        &[("balanced", BatchStrategy::Balanced), ("uniform", BatchStrategy::Uniform)],
                    )?
                }
                "sampler.kind" => {
                    c.train.miner = choice(
                        k,
                        v,
                        &[
                            ("auto", None),
                            ("semihard", Some(Miner::Semihard)),
                            ("distance_weighted", Some(Miner::DistanceWeighted)),
                            ("all_pairs", Some(Miner::AllPairs)),
                            ("none", Some(Miner::None)),
                        ],
                    )?
                }
                "sampler.min_distance" => c.train.distance_weighting.min_distance = as_f64(k, v)?,
                "sampler.cut_scale" => c.train.distance_weighting.cut_scale = as_f64(k, v)?,
                "eval.ks" => c.eval.ks = as_list(k, v, as_usize)?,
                "eval.diagnostics" => c.eval.diagnostics = as_bool(k, v)?,
                "eval.map" => c.eval.map = as_bool(k, v)?,
                "report.formats" => {
                    c.report_formats = as_list(k, v, |k, x| {
                        choice(k, x, &[("json", ReportFormat::Json), ("csv", ReportFormat::Csv)])
                    })?
                }
                "ablate.seeds" => c.ablate_seeds = as_list(k, v, as_u64)?,
                _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
            }
        }
        if let Some(s) = seed {
            c.train.seed = s;
            c.synth.seed = s;
        }
        if !finetune_set {
            c.train.finetune_epochs = (c.train.epochs as f64 * 0.1).round() as usize;
        }
        c.train.eval_ks = c.eval.ks.clone();
        c.data.source = match (source, data_path, data_train, data_test) {
            (Some(0), None, None, None) | (None, None, None, None) => DataSource::Synthetic,
            (Some(0), ..) => {
                return Err(CliError::Config(
                    "data.source = \"synthetic\" cannot be combined with data.path/data.train/data.test".into(),
                ))
            }
            (_, Some(p), None, None) => DataSource::File(p),
            (_, None, Some(train), Some(test)) => DataSource::Pair { train, test },
            (_, None, Some(_), None) => return Err(CliError::Config("data.train is set but data.test is missing".into())),
            (_, None, None, Some(_)) => return Err(CliError::Config("data.test is set but data.train is missing".into())),
            (Some(_), None, None, None) => {
                return Err(CliError::Config("data.source = \"file\" needs data.path or data.train + data.test".into()))
            }
            (_, Some(_), ..) => {
                return Err(CliError::Config("data.path cannot be combined with data.train/data.test".into()))
            }
        };
        c.validate()?;
        c.resolved = c.snapshot();
        Ok(c)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut flat = match path {
            Some(p) => read_flat(p)?,
            None => BTreeMap::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            flat.insert(k, v);
        }
        Self::from_flat(&flat, seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let f = self.data.split_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Config(format!("data.split_fraction must lie in (0, 1), got {f}")));
        }
        if self.data.source == DataSource::Synthetic {
            self.synth
                .validate()
                .map_err(|e| CliError::Config(format!("synth: {}", e)))?;
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CliError::Config("eval.ks must be a non-empty list of positive integers".into()));
        }
        if self.ablate_seeds.is_empty() {
            return Err(CliError::Config("ablate.seeds must not be empty".into()));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {}", e)))?;
        Ok(())
    }

    /// Flat key/value view of every setting, for the run's config snapshot.
    pub fn snapshot(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        let int = |x: usize| Value::Integer(x as i64);
        let t = &self.train;
        put("seed", Value::Integer(t.seed as i64));
        match &self.data.source {
            DataSource::Synthetic => put("data.source", Value::String("synthetic".into())),
            DataSource::File(p) => put("data.path", Value::String(p.display().to_string())),
            DataSource::Pair { train, test } => {
                put("data.train", Value::String(train.display().to_string()));
                put("data.test", Value::String(test.display().to_string()));
            }
        }
        put(
            "data.format",
            Value::String(match self.data.format {
                FileFormat::Binary => "binary".into(),
                FileFormat::Csv => "csv".into(),
            }),
        );
        put("data.csv_header", Value::Boolean(self.data.csv_header));
        put("data.split_fraction", Value::Float(self.data.split_fraction));
        if let Some(tc) = &self.data.train_classes {
            put("data.train_classes", Value::Array(tc.iter().map(|&c| Value::Integer(c as i64)).collect()));
        }
        if self.data.source == DataSource::Synthetic {
            let s = &self.synth;
            put("synth.num_modes", int(s.num_modes));
            put("synth.classes_per_mode", int(s.classes_per_mode));
            put("synth.samples_per_class", int(s.samples_per_class));
            put("synth.feature_dim", int(s.feature_dim));
            put("synth.mode_separation", Value::Float(s.mode_separation));
            put("synth.class_spread", Value::Float(s.class_spread));
            put("synth.noise_sigma", Value::Float(s.noise_sigma));
        }
        if let Some(d) = &self.output_dir {
            put("output.dir", Value::String(d.display().to_string()));
        }
        put("train.k", int(t.k));
        put("train.recluster_every", int(t.recluster_every));
        put("train.epochs", int(t.epochs));
        put("train.finetune_epochs", int(t.finetune_epochs));
        put("train.dim", int(t.dim));
        put("train.adapter_hidden", int(t.adapter_hidden.unwrap_or(0)));
        put("train.lr", Value::Float(t.lr));
        put("train.finetune_lr", Value::Float(t.finetune_lr));
        put("train.partition_mode", Value::String(enum_name(&t.partition_mode)));
        put("train.split_embedding", Value::Boolean(t.split_embedding));
        put("train.kmeans_max_iters", int(t.kmeans_max_iters));
        if let Some(g) = &t.group_map {
            put("train.group_map", Value::Array(g.iter().map(|&x| int(x)).collect()));
        }
        put("train.eval_during_training", Value::Boolean(t.eval_during_training));
        put("loss.kind", Value::String(enum_name(&t.loss.kind)));
        put("loss.alpha", Value::Float(t.loss.alpha));
        put("loss.beta_init", Value::Float(t.loss.beta_init));
        put("loss.beta_lr", Value::Float(t.loss.beta_lr));
        put("loss.beta_mode", Value::String(enum_name(&t.loss.beta_mode)));
        put("loss.proxy_lr", Value::Float(t.loss.proxy_lr));
        put("batch.size", int(t.batch.batch_size));
        put("batch.per_class", int(t.batch.per_class));
        put("batch.strategy", Value::String(enum_name(&t.batch.strategy)));
        put(
            "sampler.kind",
            Value::String(t.miner.map_or_else(|| "auto".to_string(), |m| enum_name(&m))),
        );
        put("sampler.min_distance", Value::Float(t.distance_weighting.min_distance));
        put("sampler.cut_scale", Value::Float(t.distance_weighting.cut_scale));
        put("eval.ks", Value::Array(self.eval.ks.iter().map(|&k| int(k)).collect()));
        put("eval.diagnostics", Value::Boolean(self.eval.diagnostics));
        put("eval.map", Value::Boolean(self.eval.map));
        put(
            "report.formats",
            Value::Array(
                self.report_formats
                    .iter()
                    .map(|f| {
                        Value::String(match f {
                            ReportFormat::Json => "json".into(),
                            ReportFormat::Csv => "csv".into(),
                        })
                    })
                    .collect(),
            ),
        );
        put(
            "ablate.seeds",
            Value::Array(self.ablate_seeds.iter().map(|&s| Value::Integer(s as i64)).collect()),
        );
        m
    }

    /// The snapshot as a TOML document of quoted dotted keys, one per line.
    pub fn snapshot_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn wants(&self, f: ReportFormat) -> bool {
        self.report_formats.contains(&f)
    }
}

/// Serde name of a unit enum variant.
fn enum_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(pairs: &[&str]) -> BTreeMap<String, Value> {
        pairs.iter().map(|p| parse_override(p).unwrap()).collect()
    }

    #[test]
    fn overrides_parse_as_toml() {
        assert_eq!(parse_override("train.k=8").unwrap().1, Value::Integer(8));
        assert_eq!(parse_override("loss.kind=margin").unwrap().1, Value::String("margin".into()));
        assert_eq!(
            parse_override("eval.ks=[1,2]").unwrap().1,
            Value::Array(vec![Value::Integer(1), Value::Integer(2)])
        );
        assert!(parse_override("nokey").is_err());
    }

    #[test]
    fn defaults_validate_and_finetune_follows_epochs() {
        let c = RunConfig::from_flat(&flat(&["train.epochs=30"]), None).unwrap();
        assert_eq!(c.train.finetune_epochs, 3);
        let c = RunConfig::from_flat(&flat(&["train.epochs=30", "train.finetune_epochs=0"]), None).unwrap();
        assert_eq!(c.train.finetune_epochs, 0);
    }

    #[test]
    fn errors_name_the_key() {
        for (bad, key) in [
            ("train.k=-1", "train.k"),
            ("loss.kind=hinge", "loss.kind"),
            ("bogus.key=1", "bogus.key"),
            ("train.lr=fast", "train.lr"),
        ] {
            let e = RunConfig::from_flat(&flat(&[bad]), None).unwrap_err();
            assert!(e.to_string().contains(key), "{e}");
        }
        let e = RunConfig::from_flat(&flat(&["train.dim=30"]), None).unwrap_err();
        assert!(e.to_string().contains("dim"), "{e}");
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::from_flat(&flat(&["train.k=2", "seed=9", "eval.map=true"]), None).unwrap();
        let text = c.snapshot_toml();
        let table: toml::Table = toml::from_str(&text).unwrap();
        let mut f = BTreeMap::new();
        flatten("", &table, &mut f);
        let again = RunConfig::from_flat(&f, None).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn global_seed_wins() {
        let c = RunConfig::from_flat(&flat(&["seed=3"]), Some(11)).unwrap();
        assert_eq!((c.train.seed, c.synth.seed), (11, 11));
    }
}
