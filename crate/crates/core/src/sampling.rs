//! Cluster selection, class-balanced batches and tuple mining.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::losses::{LossKind, Pair, Relation, Triplet, Tuples};
use crate::partition::Partition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStrategy {
    /// `batch_size / per_class` classes, `per_class` samples each.
    Balanced,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub per_class: usize,
    pub strategy: BatchStrategy,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            batch_size: 80,
            per_class: 4,
            strategy: BatchStrategy::Balanced,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch.size must be >= 1"));
        }
        if self.strategy == BatchStrategy::Balanced {
            if self.per_class < 2 {
                return Err(Error::config(format!(
                    "batch.per_class must be >= 2 for balanced batches, got {}",
                    self.per_class
                )));
            }
            if self.batch_size % self.per_class != 0 {
                return Err(Error::config(format!(
                    "batch.size ({}) must be a multiple of batch.per_class ({})",
                    self.batch_size, self.per_class
                )));
            }
        }
        Ok(())
    }
}

/// Dataset indices and labels of one mini-batch drawn from one cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub cluster: usize,
}

/// Uniform over clusters, regardless of their sizes.
pub fn sample_cluster<R: Rng>(partition: &Partition, rng: &mut R) -> usize {
    rng.random_range(0..partition.num_clusters())
}

/// Draws a batch from `members` (dataset indices of one cluster).
/// `labels` are the dataset-wide labels.
pub fn build_batch<R: Rng>(
    members: &[usize],
    labels: &[usize],
    cluster: usize,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Batch> {
    if members.is_empty() {
        return Err(Error::Degenerate(format!("cluster {cluster} is empty")));
    }
    let indices = match spec.strategy {
        BatchStrategy::Uniform => {
            if members.len() >= spec.batch_size {
                members
                    .choose_multiple(rng, spec.batch_size)
                    .copied()
                    .collect()
            } else {
                (0..spec.batch_size)
                    .map(|_| members[rng.random_range(0..members.len())])
                    .collect()
            }
        }
        BatchStrategy::Balanced => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in members {
                by_class.entry(labels[i]).or_default().push(i);
            }
            let mut classes: Vec<usize> = by_class.keys().copied().collect();
            let wanted = spec.batch_size / spec.per_class;
            if classes.len() < wanted {
                log::debug!(
                    "cluster {cluster}: {} classes, batch shrinks to {}",
                    classes.len(),
                    classes.len() * spec.per_class
                );
            }
            let take = wanted.min(classes.len());
            let (chosen, _) = classes.partial_shuffle(rng, take);
            let mut out = Vec::with_capacity(take * spec.per_class);
            for c in chosen.iter() {
                let pool = &by_class[c];
                if pool.len() >= spec.per_class {
                    out.extend(pool.choose_multiple(rng, spec.per_class).copied());
                } else {
                    out.extend((0..spec.per_class).map(|_| pool[rng.random_range(0..pool.len())]));
                }
            }
            out
        }
    };
    let batch_labels = indices.iter().map(|&i| labels[i]).collect();
    Ok(Batch {
        indices,
        labels: batch_labels,
        cluster,
    })
}

fn pairwise_distances(emb: &Matrix) -> Matrix {
    let n = emb.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = squared_distance(emb.row(i), emb.row(j)).sqrt();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Ordered anchor-positive position pairs `(a, p)`, `a != p`.
fn positive_pairs(labels: &[usize]) -> Vec<(usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if a != p && labels[a] == labels[p] {
                out.push((a, p));
            }
        }
    }
    out
}

/// For every anchor-positive pair: a random semihard negative
/// (`d(a,p) < d(a,n)` and `d(a,n)^2 < d(a,p)^2 + alpha`), else the closest
/// negative with `d(a,n) >= d(a,p)`, else nothing.
pub fn mine_semihard_triplets<R: Rng>(
    emb: &Matrix,
    labels: &[usize],
    alpha: f64,
    rng: &mut R,
) -> Vec<Triplet> {
    let dist = pairwise_distances(emb);
    let n = labels.len();
    let mut out = Vec::new();
    let mut fallbacks = 0usize;
    for (a, p) in positive_pairs(labels) {
        let dap = dist[(a, p)];
        let negatives = (0..n).filter(|&j| labels[j] != labels[a]);
        let semihard: Vec<usize> = negatives
            .clone()
            .filter(|&j| {
                let dan = dist[(a, j)];
                dap < dan && dan * dan < dap * dap + alpha
            })
            .collect();
        if let Some(&neg) = semihard.choose(rng) {
            out.push(Triplet { a, p, n: neg });
            continue;
        }
        let mut hardest: Option<(usize, f64)> = None;
        for j in negatives {
            let dan = dist[(a, j)];
            if dan >= dap && hardest.is_none_or(|(_, best)| dan < best) {
                hardest = Some((j, dan));
            }
        }
        if let Some((neg, _)) = hardest {
            fallbacks += 1;
            out.push(Triplet { a, p, n: neg });
        }
    }
    if fallbacks > 0 {
        log::trace!("semihard mining: {fallbacks} anchors fell back to the hardest valid negative");
    }
    out
}

/// Constants of the distance-weighted negative sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeighting {
    /// Distances are clipped to `[min_distance, 2 - 1e-6]`.
    pub min_distance: f64,
    /// The weight cap is `cut_scale / q(min_distance)`.
    pub cut_scale: f64,
}

impl Default for DistanceWeighting {
    fn default() -> Self {
        DistanceWeighting {
            min_distance: 0.5,
            cut_scale: 1.4,
        }
    }
}

/// `-log q(d)` for the density of pairwise distances between uniform points
/// on the unit sphere in `R^dim`: `q(d) ∝ d^(dim-2) (1 - d^2/4)^((dim-3)/2)`.
pub fn log_inverse_density(d: f64, dim: usize) -> f64 {
    let dim = dim as f64;
    -(dim - 2.0) * d.ln() - (dim - 3.0) / 2.0 * (1.0 - 0.25 * d * d).ln()
}

/// Normalized selection probabilities `∝ min(cut, 1/q(d))` for candidate
/// negatives at the given distances.
pub fn distance_weights(distances: &[f64], dim: usize, cfg: &DistanceWeighting) -> Result<Vec<f64>> {
    if dim < 3 {
        return Err(Error::config(format!(
            "distance-weighted sampling needs embedding dimension >= 3, got {dim}"
        )));
    }
    if distances.is_empty() {
        return Ok(Vec::new());
    }
    let hi = 2.0 - 1e-6;
    let log_cut = cfg.cut_scale.ln() + log_inverse_density(cfg.min_distance, dim);
    let logs: Vec<f64> = distances
        .iter()
        .map(|&d| log_inverse_density(d.clamp(cfg.min_distance, hi), dim).min(log_cut))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// One negative per anchor-positive pair, drawn with distance weighting.
pub fn mine_distance_weighted<R: Rng>(
    emb: &Matrix,
    labels: &[usize],
    cfg: &DistanceWeighting,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let dim = emb.cols();
    let dist = pairwise_distances(emb);
    let n = labels.len();
    let mut out = Vec::new();
    for (a, p) in positive_pairs(labels) {
        let negs: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        if negs.is_empty() {
            continue;
        }
        let d: Vec<f64> = negs.iter().map(|&j| dist[(a, j)]).collect();
        let w = distance_weights(&d, dim, cfg)?;
        let pick = WeightedIndex::new(&w)
            .map_err(|e| Error::Degenerate(format!("negative weights: {e}")))?
            .sample(rng);
        out.push(Triplet { a, p, n: negs[pick] });
    }
    Ok(out)
}

/// Every valid triplet in the batch.
pub fn all_triplets(labels: &[usize]) -> Vec<Triplet> {
    let n = labels.len();
    positive_pairs(labels)
        .into_iter()
        .flat_map(|(a, p)| {
            (0..n)
                .filter(move |&j| labels[j] != labels[a])
                .map(move |j| Triplet { a, p, n: j })
        })
        .collect()
}

/// Every unordered positive and negative pair in the batch.
pub fn all_pairs(labels: &[usize]) -> Vec<Pair> {
    let n = labels.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let relation = if labels[i] == labels[j] {
                Relation::Positive
            } else {
                Relation::Negative
            };
            out.push(Pair { i, j, relation });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Miner {
    Semihard,
    DistanceWeighted,
    AllPairs,
    /// No mining; every sample is a term on its own (Proxy-NCA).
    None,
}

impl Miner {
    pub fn default_for(kind: LossKind) -> Miner {
        match kind {
            LossKind::Triplet => Miner::Semihard,
            LossKind::Margin => Miner::DistanceWeighted,
            LossKind::ProxyNca => Miner::None,
        }
    }
}

/// Mines the tuples `kind` consumes from one batch of embeddings.
pub fn mine<R: Rng>(
    miner: Miner,
    kind: LossKind,
    emb: &Matrix,
    labels: &[usize],
    alpha: f64,
    dw: &DistanceWeighting,
    rng: &mut R,
) -> Result<Tuples> {
    if kind == LossKind::ProxyNca {
        return Ok(Tuples::Points);
    }
    Ok(match miner {
        Miner::Semihard => Tuples::Triplets(mine_semihard_triplets(emb, labels, alpha, rng)),
        Miner::DistanceWeighted => Tuples::Triplets(mine_distance_weighted(emb, labels, dw, rng)?),
        Miner::AllPairs => match kind {
            LossKind::Margin => Tuples::Pairs(all_pairs(labels)),
            _ => Tuples::Triplets(all_triplets(labels)),
        },
        Miner::None => {
            return Err(Error::config(format!(
                "{kind:?} loss needs a tuple miner, sampler is 'none'"
            )))
        }
    })
}
