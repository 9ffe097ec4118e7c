//! Retrieval and clustering metrics plus learner diagnostics.
//!
//! Nearest-neighbour search is exhaustive. Distance ties go to the lower
//! sample index, so every metric is a deterministic function of its input.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{merge_normalize, EmbeddingModel};
use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::partition::kmeans;

pub type RecallMap = BTreeMap<usize, f64>;

/// Serde adapter writing recall keys as strings, for maps nested where
/// integer keys cannot be recovered (internally tagged enums).
pub mod string_keys {
    use super::RecallMap;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(map: &RecallMap, s: S) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect::<BTreeMap<String, f64>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RecallMap, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

/// Indices of all other rows sorted by (distance to `q`, index).
fn ranking(q: &[f64], gallery: &Matrix, skip: Option<usize>) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..gallery.rows())
        .filter(|&j| Some(j) != skip)
        .map(|j| (squared_distance(q, gallery.row(j)), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, j)| j).collect()
}

/// Fraction of queries with a same-class sample among their `k` nearest
/// neighbours, for each `k` in `ks`.
pub fn recall_at_k(emb: &Matrix, labels: &[usize], ks: &[usize]) -> Result<RecallMap> {
    let n = emb.rows();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if n < 2 {
        return Err(Error::data("recall needs at least 2 samples"));
    }
    if ks.is_empty() {
        return Err(Error::config("no recall ks given"));
    }
    for &k in ks {
        if k == 0 || k >= n {
            return Err(Error::config(format!("recall k={k} must lie in 1..{n}")));
        }
    }
    // Rank of the first same-class neighbour, or n if none exists.
    let first_hit: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            ranking(emb.row(i), emb, Some(i))
                .iter()
                .position(|&j| labels[j] == labels[i])
                .unwrap_or(n)
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(P;T) / (H(P) + H(T))` with natural logarithms. Two single-cluster
/// partitions score 1.
pub fn nmi(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(format!(
            "nmi: {} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::data("nmi of an empty labelling"));
    }
    let n = predicted.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pc: BTreeMap<usize, usize> = BTreeMap::new();
    let mut tc: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1;
        *pc.entry(p).or_default() += 1;
        *tc.entry(t).or_default() += 1;
    }
    let hp = entropy(pc.values().copied(), n);
    let ht = entropy(tc.values().copied(), n);
    if hp + ht == 0.0 {
        return Ok(1.0);
    }
    // A single-cluster side carries no information; skip the rounding noise.
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(p, t), &c)| {
            let pj = c as f64 / n;
            pj * (pj * n * n / (pc[&p] as f64 * tc[&t] as f64)).ln()
        })
        .sum();
    Ok((2.0 * mi / (hp + ht)).clamp(0.0, 1.0))
}

fn average_precision(ranked: &[usize], glabels: &[usize], label: usize) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &j) in ranked.iter().enumerate() {
        if glabels[j] == label {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub queries: usize,
    /// Queries without a relevant gallery item; left out of the mean.
    pub excluded: usize,
}

fn mean_ap(aps: Vec<Option<f64>>) -> Result<MapResult> {
    let excluded = aps.iter().filter(|a| a.is_none()).count();
    let used: Vec<f64> = aps.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::data("mAP: no query has a relevant gallery item"));
    }
    if excluded > 0 {
        log::warn!("mAP: {excluded} queries without relevant gallery items were skipped");
    }
    Ok(MapResult {
        map: used.iter().sum::<f64>() / used.len() as f64,
        queries: used.len(),
        excluded,
    })
}

/// Mean average precision of separate query and gallery sets.
pub fn map_single_query(
    query: &Matrix,
    query_labels: &[usize],
    gallery: &Matrix,
    gallery_labels: &[usize],
) -> Result<MapResult> {
    if query.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(Error::shape("mAP: label count does not match embedding count"));
    }
    if query.cols() != gallery.cols() {
        return Err(Error::shape(format!(
            "mAP: query dimension {} vs gallery dimension {}",
            query.cols(),
            gallery.cols()
        )));
    }
    let aps = (0..query.rows())
        .into_par_iter()
        .map(|i| average_precision(&ranking(query.row(i), gallery, None), gallery_labels, query_labels[i]))
        .collect();
    mean_ap(aps)
}

/// mAP with every sample as a query against all the others.
pub fn map_leave_one_out(emb: &Matrix, labels: &[usize]) -> Result<MapResult> {
    if emb.rows() != labels.len() {
        return Err(Error::shape("mAP: label count does not match embedding count"));
    }
    let aps = (0..emb.rows())
        .into_par_iter()
        .map(|i| average_precision(&ranking(emb.row(i), emb, Some(i)), labels, labels[i]))
        .collect();
    mean_ap(aps)
}

/// Rows of `z` normalized per slice and merged, using only the first
/// `parts` of `total_parts` equal slices.
fn prefix_embeddings(z: &Matrix, total_parts: usize, parts: usize) -> Result<Matrix> {
    if total_parts == 0 || z.cols() % total_parts != 0 || parts == 0 || parts > total_parts {
        return Err(Error::shape(format!(
            "cannot take {parts} of {total_parts} slices of a {}-dim embedding",
            z.cols()
        )));
    }
    let width = z.cols() / total_parts * parts;
    let rows: Vec<Vec<f64>> = (0..z.rows())
        .into_par_iter()
        .map(|i| merge_normalize(&z.row(i)[..width], parts))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

fn slice_embeddings(z: &Matrix, total_parts: usize, k: usize) -> Result<Matrix> {
    let width = z.cols() / total_parts;
    let part = z.select_cols(k * width, (k + 1) * width);
    prefix_embeddings(&part, 1, 1)
}

/// Recall computed in each slice on its own. `z` holds raw projections.
pub fn per_learner_recall(
    z: &Matrix,
    parts: usize,
    labels: &[usize],
    ks: &[usize],
) -> Result<Vec<RecallMap>> {
    prefix_embeddings(z, parts, parts)?;
    (0..parts)
        .map(|k| recall_at_k(&slice_embeddings(z, parts, k)?, labels, ks))
        .collect()
}

/// Recall of the merged embedding restricted to slices `0..p`, for p = 1..=parts.
pub fn prefix_recall(z: &Matrix, parts: usize, labels: &[usize], ks: &[usize]) -> Result<Vec<RecallMap>> {
    (1..=parts)
        .map(|p| recall_at_k(&prefix_embeddings(z, parts, p)?, labels, ks))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// Mean |Pearson r| over dimension pairs from different slices.
    pub value: f64,
    pub pairs: usize,
    /// Dimensions dropped for having zero variance.
    pub constant_dims: usize,
}

/// Mean absolute Pearson correlation between dimensions of different
/// slices, measured across the rows of `emb`.
pub fn learner_correlation(emb: &Matrix, parts: usize) -> Result<Correlation> {
    let (n, d) = (emb.rows(), emb.cols());
    if n < 3 {
        return Err(Error::data(format!("correlation needs at least 3 samples, got {n}")));
    }
    if parts < 2 || d % parts != 0 {
        return Err(Error::shape(format!("cannot compare {parts} slices of a {d}-dim embedding")));
    }
    let width = d / parts;
    // Standardized columns; None for constant ones.
    let cols: Vec<Option<Vec<f64>>> = (0..d)
        .map(|c| {
            let v: Vec<f64> = (0..n).map(|i| emb[(i, c)]).collect();
            let mean = v.iter().sum::<f64>() / n as f64;
            let centered: Vec<f64> = v.iter().map(|x| x - mean).collect();
            let ss = centered.iter().map(|x| x * x).sum::<f64>().sqrt();
            (ss > 1e-12).then(|| centered.iter().map(|x| x / ss).collect())
        })
        .collect();
    let constant_dims = cols.iter().filter(|c| c.is_none()).count();
    if constant_dims > 0 {
        log::warn!("correlation: {constant_dims} constant dimensions excluded");
    }
    let per_dim: Vec<(f64, usize)> = (0..d)
        .into_par_iter()
        .map(|u| {
            let Some(cu) = &cols[u] else { return (0.0, 0) };
            let mut sum = 0.0;
            let mut count = 0;
            for v in (u + 1)..d {
                if v / width == u / width {
                    continue;
                }
                if let Some(cv) = &cols[v] {
                    sum += cu.iter().zip(cv).map(|(a, b)| a * b).sum::<f64>().abs();
                    count += 1;
                }
            }
            (sum, count)
        })
        .collect();
    let pairs: usize = per_dim.iter().map(|p| p.1).sum();
    if pairs == 0 {
        return Err(Error::Degenerate("correlation: no non-constant cross-slice pair".into()));
    }
    let total: f64 = per_dim.iter().map(|p| p.0).sum();
    Ok(Correlation {
        value: total / pairs as f64,
        pairs,
        constant_dims,
    })
}

pub const HISTOGRAM_BINS: usize = 64;
pub const HISTOGRAM_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Equal-width bins over `[0, 2]`; larger distances land in the last bin.
    pub counts: Vec<u64>,
    pub total: u64,
    pub mean: Option<f64>,
}

impl Histogram {
    fn new() -> Self {
        Histogram {
            counts: vec![0; HISTOGRAM_BINS],
            total: 0,
            mean: None,
        }
    }

    pub fn bin_width() -> f64 {
        HISTOGRAM_MAX / HISTOGRAM_BINS as f64
    }

    /// `bin_left,bin_right,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let w = Self::bin_width();
        let mut out = String::from("bin_left,bin_right,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", b as f64 * w, (b + 1) as f64 * w, c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeDistances {
    pub intra: Histogram,
    pub inter: Histogram,
}

/// Distances of all negative pairs, split by whether both samples share a
/// cluster.
pub fn negative_distance_histograms(
    emb: &Matrix,
    labels: &[usize],
    clusters: &[usize],
) -> Result<NegativeDistances> {
    let n = emb.rows();
    if labels.len() != n || clusters.len() != n {
        return Err(Error::shape(format!(
            "{n} embeddings, {} labels, {} cluster ids",
            labels.len(),
            clusters.len()
        )));
    }
    let w = Histogram::bin_width();
    // Per-row partial results, reduced in row order for determinism.
    let rows: Vec<[(Vec<u64>, u64, f64); 2]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = [
                (vec![0u64; HISTOGRAM_BINS], 0u64, 0.0f64),
                (vec![0u64; HISTOGRAM_BINS], 0u64, 0.0f64),
            ];
            for j in i + 1..n {
                if labels[i] == labels[j] {
                    continue;
                }
                let d = squared_distance(emb.row(i), emb.row(j)).sqrt();
                let side = usize::from(clusters[i] != clusters[j]);
                let bin = ((d / w) as usize).min(HISTOGRAM_BINS - 1);
                acc[side].0[bin] += 1;
                acc[side].1 += 1;
                acc[side].2 += d;
            }
            acc
        })
        .collect();
    let mut hs = [Histogram::new(), Histogram::new()];
    let mut sums = [0.0f64; 2];
    for row in rows {
        for (side, (counts, total, sum)) in row.into_iter().enumerate() {
            for (a, b) in hs[side].counts.iter_mut().zip(counts) {
                *a += b;
            }
            hs[side].total += total;
            sums[side] += sum;
        }
    }
    for (h, s) in hs.iter_mut().zip(sums) {
        h.mean = (h.total > 0).then(|| s / h.total as f64);
    }
    if hs[0].total == 0 {
        log::warn!("no cluster holds two classes: intra-cluster histogram is empty");
    }
    let [intra, inter] = hs;
    Ok(NegativeDistances { intra, inter })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Leave-one-out single-query mAP.
    pub map: bool,
    /// Per-learner and prefix recall, correlation, histograms.
    pub diagnostics: bool,
    /// Seed of the k-means run behind NMI.
    pub seed: u64,
    pub kmeans_max_iters: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![1, 2, 4, 8],
            map: false,
            diagnostics: false,
            seed: 0,
            kmeans_max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_samples: usize,
    pub num_classes: usize,
    pub recall_at: RecallMap,
    pub nmi: f64,
    pub map_single_query: Option<f64>,
    pub per_learner_recall: Vec<RecallMap>,
    pub prefix_recall: Vec<RecallMap>,
    pub learner_correlation: Option<f64>,
    pub negative_distances: Option<NegativeDistances>,
}

/// Metrics of the merged embedding of `features`.
///
/// `clusters`, when given, is the sample partition used for the negative
/// distance histograms; otherwise k-means with the model's learner count is
/// run on the embeddings.
pub fn evaluate(
    model: &EmbeddingModel,
    features: &Matrix,
    labels: &[usize],
    clusters: Option<&[usize]>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let parts = model.num_learners();
    let z = model.project_all(features)?;
    let emb = prefix_embeddings(&z, parts, parts)?;
    evaluate_projections(&z, &emb, parts, labels, clusters, opts)
}

/// Same as [`evaluate`] for a model whose output is globally normalized but
/// whose layer should be read as `parts` slices for the diagnostics.
pub fn evaluate_as_slices(
    model: &EmbeddingModel,
    features: &Matrix,
    labels: &[usize],
    parts: usize,
    clusters: Option<&[usize]>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let z = model.project_all(features)?;
    let emb = model.embed_all(features, None)?;
    evaluate_projections(&z, &emb, parts, labels, clusters, opts)
}

fn evaluate_projections(
    z: &Matrix,
    emb: &Matrix,
    parts: usize,
    labels: &[usize],
    clusters: Option<&[usize]>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let recall_at = recall_at_k(emb, labels, &opts.ks)?;
    let num_classes = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    let predicted = kmeans(emb, num_classes, opts.kmeans_max_iters, opts.seed)?;
    let nmi = nmi(predicted.assignment(), labels)?;
    let map_single_query = if opts.map {
        Some(map_leave_one_out(emb, labels)?.map)
    } else {
        None
    };
    let mut report = MetricReport {
        num_samples: emb.rows(),
        num_classes,
        recall_at,
        nmi,
        map_single_query,
        per_learner_recall: Vec::new(),
        prefix_recall: Vec::new(),
        learner_correlation: None,
        negative_distances: None,
    };
    if opts.diagnostics {
        report.per_learner_recall = per_learner_recall(z, parts, labels, &opts.ks)?;
        report.prefix_recall = prefix_recall(z, parts, labels, &opts.ks)?;
        if parts >= 2 {
            let sliced = prefix_embeddings(z, parts, parts)?;
            report.learner_correlation = Some(learner_correlation(&sliced, parts)?.value);
        }
        let owned;
        let clusters = match clusters {
            Some(c) => c,
            None => {
                owned = kmeans(emb, parts, opts.kmeans_max_iters, opts.seed)?;
                owned.assignment()
            }
        };
        report.negative_distances = Some(negative_distance_histograms(emb, labels, clusters)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn recall_of_separated_coincident_classes() {
        let e = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![5.0], vec![5.0]]).unwrap();
        let r = recall_at_k(&e, &[0, 0, 1, 1], &[1]).unwrap();
        assert_eq!(r[&1], 1.0);
    }

    #[test]
    fn recall_without_positives_is_zero() {
        let e = gaussian(6, 2, 1);
        let r = recall_at_k(&e, &[0, 1, 2, 3, 4, 5], &[1, 3, 5]).unwrap();
        assert!(r.values().all(|&v| v == 0.0));
        assert!(recall_at_k(&e, &[0; 6], &[6]).is_err());
    }

    #[test]
    fn recall_ties_go_to_lower_index() {
        // Query 0 is equidistant from 1 (other class) and 2 (same class).
        let e = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]]).unwrap();
        let r = recall_at_k(&e, &[0, 1, 0], &[1]).unwrap();
        // Query 0 picks 1 (miss); query 1 picks 0 (miss); query 2 picks 0 (hit).
        assert!((r[&1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[5, 5, 3, 3, 9]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
        // Contingency [[2,0],[1,1]] by hand.
        let p = [0, 0, 1, 1];
        let t = [0, 0, 0, 1];
        let ln = f64::ln;
        let hp = ln(2.0);
        let ht = -(0.75 * ln(0.75) + 0.25 * ln(0.25));
        let i = 0.5 * ln(0.5 / (0.5 * 0.75)) + 0.25 * ln(0.25 / (0.5 * 0.75)) + 0.25 * ln(0.25 / (0.5 * 0.25));
        assert!((nmi(&p, &t).unwrap() - 2.0 * i / (hp + ht)).abs() < 1e-12);
    }

    #[test]
    fn map_examples() {
        let q = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(map_single_query(&q, &[4], &g, &[4, 4, 4]).unwrap().map, 1.0);
        let g = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(map_single_query(&q, &[4], &g, &[0, 4, 1, 2]).unwrap().map, 0.5);
        let r = map_single_query(&Matrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap(), &[4, 7], &g, &[0, 4, 1, 2])
            .unwrap();
        assert_eq!((r.queries, r.excluded), (1, 1));
    }

    #[test]
    fn correlation_extremes() {
        let base = gaussian(50, 1, 2);
        let dup = Matrix::from_rows(&base.iter_rows().map(|r| vec![r[0], r[0]]).collect::<Vec<_>>()).unwrap();
        assert!((learner_correlation(&dup, 2).unwrap().value - 1.0).abs() < 1e-12);
        let n = 4000;
        let indep = gaussian(n, 8, 3);
        let c = learner_correlation(&indep, 2).unwrap();
        assert_eq!(c.pairs, 16);
        assert!(c.value <= 3.0 / (n as f64).sqrt(), "{}", c.value);
    }

    #[test]
    fn histogram_edge_cases() {
        let e = Matrix::zeros(4, 3);
        let h = negative_distance_histograms(&e, &[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(h.intra.mean, Some(0.0));
        assert_eq!(h.inter.mean, Some(0.0));
        let h = negative_distance_histograms(&gaussian(6, 2, 4), &[0, 1, 2, 0, 1, 2], &[0; 6]).unwrap();
        assert_eq!(h.inter.total, 0);
        assert_eq!(h.intra.total, 12);
        assert_eq!(h.intra.to_csv().lines().count(), HISTOGRAM_BINS + 1);
    }

    fn unit_rows(z: &Matrix, parts: usize) -> Matrix {
        prefix_embeddings(z, parts, parts).unwrap()
    }

    #[test]
    fn per_learner_and_prefix_agree_with_slicing() {
        let z = gaussian(30, 8, 5);
        let labels: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let ks = [1, 3];
        let full = recall_at_k(&unit_rows(&z, 4), &labels, &ks).unwrap();
        let pre = prefix_recall(&z, 4, &labels, &ks).unwrap();
        let per = per_learner_recall(&z, 4, &labels, &ks).unwrap();
        assert_eq!(pre[3], full);
        assert_eq!(pre[0], per[0]);
        assert_eq!(per_learner_recall(&z, 1, &labels, &ks).unwrap()[0], recall_at_k(&unit_rows(&z, 1), &labels, &ks).unwrap());
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..1000) {
            let z = gaussian(20, 3, seed);
            let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
            let r = recall_at_k(&z, &labels, &[1, 2, 5, 19]).unwrap();
            let v: Vec<f64> = r.values().copied().collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(v[3], 1.0);
        }

        #[test]
        fn nmi_is_symmetric_and_permutation_invariant(
            a in prop::collection::vec(0usize..4, 1..40),
            seed in 0u64..100,
        ) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<usize> = a.iter().map(|_| r.random_range(0..3)).collect();
            let x = nmi(&a, &b).unwrap();
            prop_assert!((x - nmi(&b, &a).unwrap()).abs() < 1e-12);
            let a2: Vec<usize> = a.iter().map(|v| 10 - v).collect();
            prop_assert!((x - nmi(&a2, &b).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
