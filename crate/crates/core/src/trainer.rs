//! The alternating divide-and-conquer training loop and the final
//! fine-tuning of the merged embedding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureDataset;
use crate::embedding::{AdamConfig, EmbeddingModel, LearnerSlice, ModelOptimizer};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, RecallMap};
use crate::linalg::Matrix;
use crate::losses::{batch_loss, Betas, LossConfig, LossKind, LossParams, ProxyBank};
use crate::partition::{
    contiguous_groups, iou_matrix, kmeans_traced, label_partition, match_learners, random_partition,
    Partition,
};
use crate::sampling::{build_batch, mine, sample_cluster, Batch, BatchSpec, DistanceWeighting, Miner};

const CLUSTER_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// k-means on the merged embedding of the training set.
    Kmeans,
    /// One fixed random assignment.
    Random,
    /// Whole classes grouped by `group_map`.
    Labels,
    /// A single cluster holding everything.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of clusters, and of learners when the embedding is split.
    pub k: usize,
    /// Re-clustering period in epochs.
    pub recluster_every: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Adapter width; `None` trains the embedding layer on raw features.
    pub adapter_hidden: Option<usize>,
    pub loss: LossConfig,
    pub batch: BatchSpec,
    /// `None` picks the default miner of the loss.
    pub miner: Option<Miner>,
    pub distance_weighting: DistanceWeighting,
    pub lr: f64,
    pub finetune_lr: f64,
    pub seed: u64,
    pub partition_mode: PartitionMode,
    /// `false` trains the full embedding on every cluster's batches.
    pub split_embedding: bool,
    pub kmeans_max_iters: usize,
    /// Cluster of each dense class label for `PartitionMode::Labels`;
    /// contiguous groups when absent.
    pub group_map: Option<Vec<usize>>,
    /// Test-set metrics after every re-clustering, when a test set is given.
    pub eval_during_training: bool,
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            recluster_every: 2,
            epochs: 40,
            finetune_epochs: 4,
            dim: 32,
            adapter_hidden: Some(32),
            loss: LossConfig::default(),
            batch: BatchSpec::default(),
            miner: None,
            distance_weighting: DistanceWeighting::default(),
            lr: 1e-3,
            finetune_lr: 1e-4,
            seed: 0,
            partition_mode: PartitionMode::Kmeans,
            split_embedding: true,
            kmeans_max_iters: 100,
            group_map: None,
            eval_during_training: true,
            eval_ks: vec![1, 2, 4, 8],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.recluster_every == 0 {
            return Err(Error::config("recluster_every must be >= 1"));
        }
        if self.dim == 0 || self.dim % self.learners() != 0 {
            return Err(Error::config(format!(
                "dim ({}) must be a positive multiple of k ({})",
                self.dim,
                self.learners()
            )));
        }
        if self.adapter_hidden == Some(0) {
            return Err(Error::config("adapter_hidden must be >= 1"));
        }
        for (name, v) in [("lr", self.lr), ("finetune_lr", self.finetune_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::config("kmeans_max_iters must be >= 1"));
        }
        if self.partition_mode == PartitionMode::None && self.k > 1 && self.split_embedding {
            return Err(Error::config(
                "partition_mode 'none' with k > 1 leaves learners without data; set k = 1 or split_embedding = false",
            ));
        }
        if self.eval_ks.is_empty() {
            return Err(Error::config("eval_ks must not be empty"));
        }
        self.loss.validate()?;
        self.batch.validate()?;
        let miner = self.miner();
        if miner == Miner::None && self.loss.kind != LossKind::ProxyNca {
            return Err(Error::config(format!("{:?} loss needs a tuple miner", self.loss.kind)));
        }
        if miner == Miner::DistanceWeighted {
            let slice_dim = self.dim / self.learners();
            if slice_dim < 3 {
                return Err(Error::config(format!(
                    "distance-weighted sampling needs learner dimension >= 3, got {slice_dim}"
                )));
            }
        }
        Ok(())
    }

    pub fn miner(&self) -> Miner {
        self.miner.unwrap_or(Miner::default_for(self.loss.kind))
    }

    /// Learner count of the model: `k` when split, else 1.
    pub fn learners(&self) -> usize {
        if self.split_embedding {
            self.k
        } else {
            1
        }
    }
}

/// Randomly initialized model for `cfg` on `input_dim`-dimensional features.
pub fn init_model(cfg: &TrainConfig, input_dim: usize) -> Result<EmbeddingModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    EmbeddingModel::new_random(input_dim, cfg.dim, cfg.learners(), cfg.adapter_hidden, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Finetune,
    Done,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Recluster {
        epoch: usize,
        sizes: Vec<usize>,
        /// Total IoU of the learner matching; absent for the first clustering.
        total_iou: Option<f64>,
        kmeans_objective: Option<f64>,
    },
    Epoch {
        epoch: usize,
        iterations: usize,
        /// Mean batch loss per learner; `None` if the learner was not updated.
        learner_loss: Vec<Option<f64>>,
        cluster_draws: Vec<usize>,
        degenerate_batches: usize,
    },
    Eval {
        epoch: usize,
        stage: Stage,
        #[serde(with = "crate::eval::string_keys")]
        recall_at: RecallMap,
        nmi: f64,
    },
    Finetune {
        epoch: usize,
        iterations: usize,
        loss: Option<f64>,
        degenerate_batches: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }

    pub fn recluster_epochs(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Recluster { epoch, .. } => Some(*epoch),
                _ => None,
            })
            .collect()
    }
}

/// Everything needed to continue a run: parameters, optimizer moments,
/// auxiliary loss parameters, the partition, RNG positions and the log.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: EmbeddingModel,
    pub optimizer: ModelOptimizer,
    /// One entry per learner during training, a single one when fine-tuning.
    pub betas: Vec<Betas>,
    pub proxies: Vec<ProxyBank>,
    pub partition: Option<Partition>,
    pub stage: Stage,
    /// Next epoch to run within the current stage.
    pub epoch: usize,
    pub last_recluster: Option<usize>,
    pub cluster_rng: ChaCha8Rng,
    pub batch_rng: ChaCha8Rng,
    pub log: TrainLog,
}

impl TrainState {
    /// Fresh state at epoch 0 of the training stage.
    pub fn new(ds: &FeatureDataset, model: EmbeddingModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        check_model(&config, &model, ds)?;
        let optimizer = ModelOptimizer::new(
            &model,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        let learners = model.num_learners();
        let betas = (0..learners)
            .map(|_| Betas::new(config.loss.beta_mode, config.loss.beta_init, ds.num_classes()))
            .collect();
        let proxies = if config.loss.kind == LossKind::ProxyNca {
            (0..learners)
                .map(|k| {
                    let slice = (learners > 1).then(|| model.slice(k)).transpose()?;
                    let emb = model.embed_all(ds.features(), slice)?;
                    ProxyBank::from_class_means(&emb, ds.labels(), config.loss.proxy_lr)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(TrainState {
            cluster_rng: stream(config.seed, CLUSTER_STREAM),
            batch_rng: stream(config.seed, BATCH_STREAM),
            config,
            model,
            optimizer,
            betas,
            proxies,
            partition: None,
            stage: Stage::Train,
            epoch: 0,
            last_recluster: None,
            log: TrainLog::default(),
        })
    }

    /// Checks that a resumed state fits `config` and the training data.
    pub fn check_compatible(&self, config: &TrainConfig, ds: &FeatureDataset) -> Result<()> {
        let c = &self.config;
        if c.k != config.k {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with k={} but the config has k={}",
                c.k, config.k
            )));
        }
        if c.dim != config.dim {
            return Err(Error::Checkpoint(format!(
                "checkpoint has dim={} but the config has dim={}",
                c.dim, config.dim
            )));
        }
        if c.split_embedding != config.split_embedding {
            return Err(Error::Checkpoint(format!(
                "checkpoint has split_embedding={} but the config has split_embedding={}",
                c.split_embedding, config.split_embedding
            )));
        }
        check_model(c, &self.model, ds)
    }
}

fn check_model(cfg: &TrainConfig, model: &EmbeddingModel, ds: &FeatureDataset) -> Result<()> {
    if model.input_dim() != ds.dim() {
        return Err(Error::shape(format!(
            "model expects {}-dim features, data has {}",
            model.input_dim(),
            ds.dim()
        )));
    }
    if model.dim() != cfg.dim || model.num_learners() != cfg.learners() {
        return Err(Error::shape(format!(
            "model has d={} with {} learners, config wants d={} with {}",
            model.dim(),
            model.num_learners(),
            cfg.dim,
            cfg.learners()
        )));
    }
    if ds.len() < cfg.k {
        return Err(Error::data(format!("{} training samples for k={}", ds.len(), cfg.k)));
    }
    Ok(())
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Drives a [`TrainState`] over a training set, one epoch at a time.
pub struct Trainer<'a> {
    train: &'a FeatureDataset,
    test: Option<&'a FeatureDataset>,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a FeatureDataset,
        test: Option<&'a FeatureDataset>,
        model: EmbeddingModel,
        config: TrainConfig,
    ) -> Result<Self> {
        Ok(Trainer {
            train,
            test,
            state: TrainState::new(train, model, config)?,
        })
    }

    pub fn resume(train: &'a FeatureDataset, test: Option<&'a FeatureDataset>, state: TrainState) -> Result<Self> {
        state.check_compatible(&state.config, train)?;
        Ok(Trainer { train, test, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn cfg(&self) -> &TrainConfig {
        &self.state.config
    }

    /// Runs the next epoch of whichever stage is current, moving from
    /// training to fine-tuning when the training budget is spent. Returns
    /// `false` once nothing is left to do.
    pub fn run_epoch(&mut self) -> Result<bool> {
        loop {
            match self.state.stage {
                Stage::Train => {
                    let e = self.state.epoch;
                    let due = e % self.cfg().recluster_every == 0 && (e < self.cfg().epochs || e == 0);
                    if due && self.state.last_recluster != Some(e) {
                        self.recluster(e)?;
                        self.evaluate_test(e)?;
                    }
                    if e < self.cfg().epochs {
                        self.train_epoch(e)?;
                        self.state.epoch += 1;
                        return Ok(true);
                    }
                    self.begin_finetune()?;
                }
                Stage::Finetune => {
                    let e = self.state.epoch;
                    if e < self.cfg().finetune_epochs {
                        self.finetune_epoch(e)?;
                        self.state.epoch += 1;
                        return Ok(true);
                    }
                    self.state.stage = Stage::Done;
                }
                Stage::Done => return Ok(false),
            }
        }
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<()> {
        while self.run_epoch()? {}
        Ok(())
    }

    /// Partitions the training set for `epoch` and binds the new clusters to
    /// learners by maximum total IoU with the previous partition.
    pub fn recluster(&mut self, epoch: usize) -> Result<()> {
        let cfg = self.state.config.clone();
        let n = self.train.len();
        let mut objective = None;
        let next = match cfg.partition_mode {
            PartitionMode::Kmeans => {
                let emb = self.state.model.embed_all(self.train.features(), None)?;
                let run = kmeans_traced(&emb, cfg.k, cfg.kmeans_max_iters, cfg.seed.wrapping_add(epoch as u64))?;
                objective = run.objective_trace.last().copied();
                run.partition
            }
            PartitionMode::Random => random_partition(n, cfg.k, cfg.seed)?,
            PartitionMode::Labels => {
                let groups = match &cfg.group_map {
                    Some(g) => g.clone(),
                    None => contiguous_groups(self.train.num_classes(), cfg.k),
                };
                label_partition(self.train.labels(), cfg.k, &groups)?
            }
            PartitionMode::None => Partition::single(n, epoch as u64)?,
        };
        let (mut next, total_iou) = match &self.state.partition {
            Some(prev) => {
                let m = match_learners(&iou_matrix(prev, &next)?)?;
                (next.relabel(&m.permutation)?, Some(m.total_iou))
            }
            None => (next, None),
        };
        next.epoch_created = epoch as u64;
        self.state.log.records.push(LogRecord::Recluster {
            epoch,
            sizes: next.sizes(),
            total_iou,
            kmeans_objective: objective,
        });
        log::info!("epoch {epoch}: re-clustered, sizes {:?}", next.sizes());
        self.state.partition = Some(next);
        self.state.last_recluster = Some(epoch);
        Ok(())
    }

    fn evaluate_test(&mut self, epoch: usize) -> Result<()> {
        let Some(test) = self.test else { return Ok(()) };
        if !self.cfg().eval_during_training {
            return Ok(());
        }
        let opts = EvalOptions {
            ks: self.cfg().eval_ks.clone(),
            seed: self.cfg().seed,
            kmeans_max_iters: self.cfg().kmeans_max_iters,
            ..EvalOptions::default()
        };
        let r = evaluate(&self.state.model, test.features(), test.labels(), None, &opts)?;
        self.state.log.records.push(LogRecord::Eval {
            epoch,
            stage: self.state.stage,
            recall_at: r.recall_at,
            nmi: r.nmi,
        });
        Ok(())
    }

    fn iterations(&self) -> usize {
        self.train.len().div_ceil(self.cfg().batch.batch_size)
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<()> {
        let partition = self
            .state
            .partition
            .clone()
            .ok_or_else(|| Error::Degenerate("training epoch without a partition".into()))?;
        let members = partition.members();
        let learners = self.state.model.num_learners();
        let split = self.cfg().split_embedding;
        let iterations = self.iterations();
        let mut sums = vec![0.0; learners];
        let mut counts = vec![0usize; learners];
        let mut draws = vec![0usize; partition.num_clusters()];
        let mut degenerate = 0;
        for _ in 0..iterations {
            let c = sample_cluster(&partition, &mut self.state.cluster_rng);
            draws[c] += 1;
            let spec = self.cfg().batch;
            let batch = build_batch(&members[c], self.train.labels(), c, &spec, &mut self.state.batch_rng)?;
            let (learner, slice) = if split {
                (c, Some(self.state.model.slice(c)?))
            } else {
                (0, None)
            };
            match self.step(&batch, slice, learner)? {
                Some(l) => {
                    sums[learner] += l;
                    counts[learner] += 1;
                }
                None => degenerate += 1,
            }
        }
        let learner_loss = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        self.state.log.records.push(LogRecord::Epoch {
            epoch,
            iterations,
            learner_loss,
            cluster_draws: draws,
            degenerate_batches: degenerate,
        });
        Ok(())
    }

    /// One update of learner `learner` (or the full embedding when `slice`
    /// is `None`) and the adapter. Returns the batch loss, or `None` for a
    /// batch without loss terms.
    fn step(&mut self, batch: &Batch, slice: Option<LearnerSlice>, learner: usize) -> Result<Option<f64>> {
        let cfg = &self.state.config;
        let inputs: Vec<&[f64]> = batch.indices.iter().map(|&i| self.train.feature(i)).collect();
        let rows = inputs
            .iter()
            .map(|x| self.state.model.forward(x, slice))
            .collect::<Result<Vec<_>>>()?;
        let emb = Matrix::from_rows(&rows)?;
        let tuples = mine(
            cfg.miner(),
            cfg.loss.kind,
            &emb,
            &batch.labels,
            cfg.loss.alpha,
            &cfg.distance_weighting,
            &mut self.state.batch_rng,
        )?;
        let params = LossParams {
            betas: self.state.betas.get(learner),
            proxies: self.state.proxies.get(learner),
        };
        let out = batch_loss(&emb, &batch.labels, &cfg.loss, &tuples, params)?;
        if out.terms == 0 {
            return Ok(None);
        }
        let grads = self.state.model.backward(&inputs, &out.grads, slice)?;
        let beta_lr = cfg.loss.beta_lr;
        let kind = cfg.loss.kind;
        self.state.optimizer.step(&mut self.state.model, &grads)?;
        if kind == LossKind::Margin {
            self.state.betas[learner].apply_gradient(&out.beta_grad, beta_lr);
        }
        if let (Some(pg), Some(bank)) = (&out.proxy_grad, self.state.proxies.get_mut(learner)) {
            bank.apply_gradient(pg)?;
        }
        Ok(Some(out.loss))
    }

    /// Switches to fine-tuning: one shared margin boundary starting at the
    /// mean of the learners', proxies re-seeded from merged class means.
    fn begin_finetune(&mut self) -> Result<()> {
        let cfg = self.state.config.clone();
        let mean_beta = self.state.betas.iter().map(Betas::mean).sum::<f64>() / self.state.betas.len().max(1) as f64;
        self.state.betas = vec![Betas::new(cfg.loss.beta_mode, mean_beta, self.train.num_classes())];
        self.state.proxies = if cfg.loss.kind == LossKind::ProxyNca && cfg.finetune_epochs > 0 {
            let emb = self.state.model.embed_all(self.train.features(), None)?;
            vec![ProxyBank::from_class_means(&emb, self.train.labels(), cfg.loss.proxy_lr)?]
        } else {
            Vec::new()
        };
        self.state.optimizer.set_lr(cfg.finetune_lr);
        self.state.stage = Stage::Finetune;
        self.state.epoch = 0;
        Ok(())
    }

    fn finetune_epoch(&mut self, epoch: usize) -> Result<()> {
        let all: Vec<usize> = (0..self.train.len()).collect();
        let iterations = self.iterations();
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..iterations {
            let spec = self.cfg().batch;
            let batch = build_batch(&all, self.train.labels(), 0, &spec, &mut self.state.batch_rng)?;
            if let Some(l) = self.step(&batch, None, 0)? {
                sum += l;
                count += 1;
            }
        }
        self.state.log.records.push(LogRecord::Finetune {
            epoch,
            iterations,
            loss: (count > 0).then(|| sum / count as f64),
            degenerate_batches: iterations - count,
        });
        Ok(())
    }

    /// Loss of the merged embedding on fixed batches, without updating
    /// anything. Uses all valid tuples so the value is deterministic.
    pub fn merged_loss(&self, batches: &[Vec<usize>]) -> Result<f64> {
        let cfg = &self.state.config;
        let mut total = 0.0;
        for idx in batches {
            let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels()[i]).collect();
            let rows = idx
                .iter()
                .map(|&i| self.state.model.forward(self.train.feature(i), None))
                .collect::<Result<Vec<_>>>()?;
            let emb = Matrix::from_rows(&rows)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let miner = if cfg.loss.kind == LossKind::ProxyNca {
                Miner::None
            } else {
                Miner::AllPairs
            };
            let tuples = mine(miner, cfg.loss.kind, &emb, &labels, cfg.loss.alpha, &cfg.distance_weighting, &mut rng)?;
            let params = LossParams {
                betas: self.state.betas.first(),
                proxies: self.state.proxies.first(),
            };
            total += batch_loss(&emb, &labels, &cfg.loss, &tuples, params)?.loss;
        }
        Ok(total / batches.len().max(1) as f64)
    }
}

/// Alternating training only (no fine-tuning). With `epochs = 0` the
/// model is untouched and the log holds the initial clustering.
pub fn train(ds: &FeatureDataset, model: EmbeddingModel, cfg: &TrainConfig) -> Result<(EmbeddingModel, TrainLog)> {
    let cfg = TrainConfig {
        finetune_epochs: 0,
        ..cfg.clone()
    };
    let mut t = Trainer::new(ds, None, model, cfg)?;
    t.run()?;
    let s = t.into_state();
    Ok((s.model, s.log))
}

/// Fine-tuning of the merged embedding on global batches.
pub fn finetune(ds: &FeatureDataset, model: EmbeddingModel, cfg: &TrainConfig) -> Result<(EmbeddingModel, TrainLog)> {
    let mut t = Trainer::new(ds, None, model, cfg.clone())?;
    t.begin_finetune()?;
    t.run()?;
    let s = t.into_state();
    Ok((s.model, s.log))
}

/// Cluster-confined batches that always update the full embedding.
pub fn train_nosplit_ablation(
    ds: &FeatureDataset,
    model: EmbeddingModel,
    cfg: &TrainConfig,
) -> Result<(EmbeddingModel, TrainLog)> {
    if cfg.split_embedding {
        return Err(Error::config("the no-split ablation needs split_embedding = false"));
    }
    train(ds, model, cfg)
}

/// The grouping variants compared against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One learner, no partitioning.
    Baseline,
    KmeansNoSplit,
    RandomPartition,
    LabelGrouping,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::KmeansNoSplit,
        Variant::RandomPartition,
        Variant::LabelGrouping,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::KmeansNoSplit => "kmeans_no_split",
            Variant::RandomPartition => "random_partition",
            Variant::LabelGrouping => "label_grouping",
            Variant::Full => "full",
        }
    }

    /// `base` rewired for this variant.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Baseline => {
                c.k = 1;
                c.partition_mode = PartitionMode::None;
                c.split_embedding = false;
            }
            Variant::KmeansNoSplit => {
                c.partition_mode = PartitionMode::Kmeans;
                c.split_embedding = false;
            }
            Variant::RandomPartition => {
                c.partition_mode = PartitionMode::Random;
                c.split_embedding = true;
            }
            Variant::LabelGrouping => {
                c.partition_mode = PartitionMode::Labels;
                c.split_embedding = true;
            }
            Variant::Full => {
                c.partition_mode = PartitionMode::Kmeans;
                c.split_embedding = true;
            }
        }
        c
    }
}

/// Mean value of each entry across several recall maps.
pub fn mean_recall(maps: &[RecallMap]) -> RecallMap {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for m in maps {
        for (&k, &v) in m {
            let e = acc.entry(k).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthSpec};
    use crate::losses::LossKind;
    use crate::sampling::BatchStrategy;

    fn small_data(seed: u64) -> FeatureDataset {
        generate_synthetic(&SynthSpec {
            num_modes: 4,
            classes_per_mode: 3,
            samples_per_class: 8,
            feature_dim: 8,
            seed,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            k: 2,
            dim: 8,
            adapter_hidden: Some(8),
            epochs: 4,
            finetune_epochs: 1,
            batch: BatchSpec {
                batch_size: 16,
                per_class: 4,
                strategy: BatchStrategy::Balanced,
            },
            lr: 1e-2,
            finetune_lr: 1e-3,
            eval_ks: vec![1, 2],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(small_cfg().validate().is_ok());
        let bad = [
            TrainConfig { k: 0, ..small_cfg() },
            TrainConfig { recluster_every: 0, ..small_cfg() },
            TrainConfig { dim: 9, ..small_cfg() },
            TrainConfig { lr: -1.0, ..small_cfg() },
            TrainConfig { miner: Some(Miner::None), ..small_cfg() },
            TrainConfig { k: 4, ..small_cfg() }, // 2-dim learners with distance weighting
            TrainConfig { partition_mode: PartitionMode::None, ..small_cfg() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn zero_epochs_only_clusters() {
        let ds = small_data(1);
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let model = init_model(&cfg, ds.dim()).unwrap();
        let (out, log) = train(&ds, model.clone(), &cfg).unwrap();
        assert_eq!(out, model);
        assert_eq!(log.recluster_epochs(), vec![0]);
        assert_eq!(log.records.len(), 1);
    }

    #[test]
    fn recluster_cadence() {
        let ds = small_data(2);
        let cfg = TrainConfig { epochs: 5, ..small_cfg() };
        let (_, log) = train(&ds, init_model(&cfg, ds.dim()).unwrap(), &cfg).unwrap();
        assert_eq!(log.recluster_epochs(), vec![0, 2, 4]);
        let first_iou = log.records.iter().find_map(|r| match r {
            LogRecord::Recluster { total_iou, .. } => Some(*total_iou),
            _ => None,
        });
        assert_eq!(first_iou, Some(None));
    }

    #[test]
    fn single_learner_kmeans_matches_baseline_bitwise() {
        let ds = small_data(3);
        let dc = TrainConfig { k: 1, ..small_cfg() };
        let base = Variant::Baseline.configure(&dc);
        let m1 = init_model(&dc, ds.dim()).unwrap();
        let m2 = init_model(&base, ds.dim()).unwrap();
        assert_eq!(m1, m2);
        let (a, _) = train(&ds, m1, &dc).unwrap();
        let (b, _) = train(&ds, m2, &base).unwrap();
        assert_eq!(a.weight().as_slice(), b.weight().as_slice());
        assert_eq!(a.adapter(), b.adapter());
    }

    #[test]
    fn nosplit_updates_touch_all_rows() {
        let ds = small_data(4);
        let cfg = Variant::KmeansNoSplit.configure(&TrainConfig { epochs: 1, ..small_cfg() });
        let model = init_model(&cfg, ds.dim()).unwrap();
        let (out, _) = train_nosplit_ablation(&ds, model.clone(), &cfg).unwrap();
        for r in 0..cfg.dim {
            assert_ne!(out.weight().row(r), model.weight().row(r), "row {r}");
        }
        assert!(train_nosplit_ablation(&ds, model, &small_cfg()).is_err());
    }

    #[test]
    fn finetune_edge_cases() {
        let ds = small_data(5);
        let cfg = TrainConfig { finetune_epochs: 0, ..small_cfg() };
        let model = init_model(&cfg, ds.dim()).unwrap();
        let (out, log) = finetune(&ds, model.clone(), &cfg).unwrap();
        assert_eq!(out, model);
        assert!(log.records.is_empty());

        let cfg = TrainConfig { finetune_lr: 0.0, ..small_cfg() };
        let (out, log) = finetune(&ds, model.clone(), &cfg).unwrap();
        assert_eq!(out, model);
        assert!(matches!(log.records[0], LogRecord::Finetune { loss: Some(_), .. }));
    }

    #[test]
    fn finetune_lowers_loss_on_fixed_batches() {
        let ds = small_data(6);
        let cfg = TrainConfig {
            finetune_epochs: 10,
            finetune_lr: 5e-3,
            ..small_cfg()
        };
        let model = init_model(&cfg, ds.dim()).unwrap();
        let mut t = Trainer::new(&ds, None, model, cfg).unwrap();
        t.begin_finetune().unwrap();
        let batches: Vec<Vec<usize>> = (0..4).map(|b| (b * 24..(b + 1) * 24).collect()).collect();
        let before = t.merged_loss(&batches).unwrap();
        t.run().unwrap();
        let after = t.merged_loss(&batches).unwrap();
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn runs_are_deterministic_for_every_loss() {
        let ds = small_data(7);
        for kind in [LossKind::Triplet, LossKind::Margin, LossKind::ProxyNca] {
            let mut cfg = small_cfg();
            cfg.loss.kind = kind;
            if kind == LossKind::ProxyNca {
                cfg.batch.strategy = BatchStrategy::Uniform;
            }
            let run = || {
                let mut t = Trainer::new(&ds, Some(&ds), init_model(&cfg, ds.dim()).unwrap(), cfg.clone()).unwrap();
                t.run().unwrap();
                t.into_state().log.to_jsonl().unwrap()
            };
            let a = run();
            assert_eq!(a, run());
            let log = TrainLog::from_jsonl(&a).unwrap();
            assert_eq!(log.to_jsonl().unwrap(), a);
        }
    }

    #[test]
    fn learner_isolation_over_an_epoch_step() {
        let ds = small_data(8);
        let cfg = small_cfg();
        let mut t = Trainer::new(&ds, None, init_model(&cfg, ds.dim()).unwrap(), cfg).unwrap();
        t.recluster(0).unwrap();
        let members = t.state.partition.as_ref().unwrap().members();
        let before = t.state.model.clone();
        let spec = t.state.config.batch;
        let batch = build_batch(&members[1], ds.labels(), 1, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let slice = t.state.model.slice(1).unwrap();
        t.step(&batch, Some(slice), 1).unwrap().unwrap();
        let w0 = t.state.model.weight().row_block(0, 4);
        assert_eq!(w0, before.weight().row_block(0, 4));
        assert_ne!(t.state.model.weight().row_block(4, 8), before.weight().row_block(4, 8));
    }
}
