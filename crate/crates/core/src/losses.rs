//! Metric-learning losses with analytic gradients w.r.t. the embeddings.
//!
//! - triplet: `[|a-p|^2 - |a-n|^2 + alpha]_+`
//! - margin: `[alpha + y (|x_i - x_j| - beta)]_+`, `y = +1` for positive
//!   pairs and `-1` for negative pairs, with a learnable boundary `beta`
//! - Proxy-NCA: `-log(exp(-|x - p_y|^2) / sum_{z != y} exp(-|x - p_z|^2))`

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{adam_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::linalg::{normalize_in_place, squared_distance, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    Margin,
    ProxyNca,
}

/// Whether the margin loss keeps one boundary per learner or one per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    Learner,
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub beta_init: f64,
    pub beta_lr: f64,
    pub beta_mode: BetaMode,
    pub proxy_lr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Margin,
            alpha: 0.2,
            beta_init: 1.2,
            beta_lr: 0.01,
            beta_mode: BetaMode::Learner,
            proxy_lr: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("loss.alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta_init > 0.0 && self.beta_init.is_finite()) {
            return Err(Error::config(format!(
                "loss.beta_init must be > 0, got {}",
                self.beta_init
            )));
        }
        if !(self.beta_lr >= 0.0) || !(self.proxy_lr >= 0.0) {
            return Err(Error::config("loss.beta_lr and loss.proxy_lr must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_a: Vec<f64>,
    pub grad_p: Vec<f64>,
    pub grad_n: Vec<f64>,
}

pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], alpha: f64) -> TripletOutput {
    let dim = a.len();
    let value = squared_distance(a, p) - squared_distance(a, n) + alpha;
    if value <= 0.0 {
        return TripletOutput {
            loss: 0.0,
            grad_a: vec![0.0; dim],
            grad_p: vec![0.0; dim],
            grad_n: vec![0.0; dim],
        };
    }
    let grad_a = (0..dim).map(|i| 2.0 * (n[i] - p[i])).collect();
    let grad_p = (0..dim).map(|i| -2.0 * (a[i] - p[i])).collect();
    let grad_n = (0..dim).map(|i| 2.0 * (a[i] - n[i])).collect();
    TripletOutput {
        loss: value,
        grad_a,
        grad_p,
        grad_n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Positive,
    Negative,
}

impl Relation {
    fn sign(self) -> f64 {
        match self {
            Relation::Positive => 1.0,
            Relation::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginOutput {
    pub loss: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
    pub grad_beta: f64,
}

pub fn margin_loss(xi: &[f64], xj: &[f64], relation: Relation, alpha: f64, beta: f64) -> MarginOutput {
    let dim = xi.len();
    let d = squared_distance(xi, xj).sqrt();
    let y = relation.sign();
    let value = alpha + y * (d - beta);
    if value <= 0.0 {
        return MarginOutput {
            loss: 0.0,
            grad_i: vec![0.0; dim],
            grad_j: vec![0.0; dim],
            grad_beta: 0.0,
        };
    }
    // d|xi - xj|/dxi is undefined at coincident points; use 0 there.
    let grad_i: Vec<f64> = if d > 0.0 {
        (0..dim).map(|k| y * (xi[k] - xj[k]) / d).collect()
    } else {
        vec![0.0; dim]
    };
    let grad_j = grad_i.iter().map(|g| -g).collect();
    MarginOutput {
        loss: value,
        grad_i,
        grad_j,
        grad_beta: -y,
    }
}

/// Learnable proxies for the classes one learner sees, kept unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyBank {
    classes: Vec<usize>,
    proxies: Matrix,
    state: AdamState,
}

impl ProxyBank {
    /// One proxy per class: the normalized mean of that class's embeddings.
    pub fn from_class_means(embeddings: &Matrix, labels: &[usize], lr: f64) -> Result<Self> {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (row, &l) in embeddings.iter_rows().zip(labels) {
            let e = sums
                .entry(l)
                .or_insert_with(|| (vec![0.0; embeddings.cols()], 0));
            for (s, v) in e.0.iter_mut().zip(row) {
                *s += v;
            }
            e.1 += 1;
        }
        let mut classes = Vec::with_capacity(sums.len());
        let mut rows = Vec::with_capacity(sums.len());
        for (c, (mut s, _)) in sums {
            if normalize_in_place(&mut s).is_none() {
                // Class mean at the origin: fall back to the first axis.
                s.iter_mut().for_each(|v| *v = 0.0);
                s[0] = 1.0;
            }
            classes.push(c);
            rows.push(s);
        }
        Self::new(classes, Matrix::from_rows(&rows)?, lr)
    }

    pub fn new(classes: Vec<usize>, mut proxies: Matrix, lr: f64) -> Result<Self> {
        if classes.len() != proxies.rows() {
            return Err(Error::shape(format!(
                "{} classes but {} proxies",
                classes.len(),
                proxies.rows()
            )));
        }
        for i in 0..proxies.rows() {
            if normalize_in_place(proxies.row_mut(i)).is_none() {
                return Err(Error::Degenerate(format!("proxy {i} has zero length")));
            }
        }
        let state = AdamState::new(
            proxies.as_slice().len(),
            AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        );
        Ok(ProxyBank {
            classes,
            proxies,
            state,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn proxies(&self) -> &Matrix {
        &self.proxies
    }

    pub fn dim(&self) -> usize {
        self.proxies.cols()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn from_parts(classes: Vec<usize>, proxies: Matrix, state: AdamState) -> Result<Self> {
        if state.m.len() != proxies.as_slice().len() || classes.len() != proxies.rows() {
            return Err(Error::shape("proxy bank parts disagree in size"));
        }
        Ok(ProxyBank {
            classes,
            proxies,
            state,
        })
    }

    /// Adam step on the raw proxies, then projection back to unit length.
    pub fn apply_gradient(&mut self, grad: &Matrix) -> Result<()> {
        adam_step(self.proxies.as_mut_slice(), grad.as_slice(), &mut self.state)?;
        for i in 0..self.proxies.rows() {
            if normalize_in_place(self.proxies.row_mut(i)).is_none() {
                return Err(Error::Degenerate(format!("proxy {i} collapsed to zero")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyOutput {
    pub loss: f64,
    pub grad_x: Vec<f64>,
    /// One row per proxy in bank order.
    pub grad_proxies: Matrix,
}

pub fn proxy_nca_loss(x: &[f64], y: usize, bank: &ProxyBank) -> Result<ProxyOutput> {
    if bank.len() < 2 {
        return Err(Error::Degenerate(format!(
            "Proxy-NCA needs at least 2 proxies, bank has {}",
            bank.len()
        )));
    }
    let py = bank
        .index_of(y)
        .ok_or_else(|| Error::data(format!("no proxy for class {y}")))?;
    if x.len() != bank.dim() {
        return Err(Error::shape(format!(
            "embedding has {} dims, proxies have {}",
            x.len(),
            bank.dim()
        )));
    }
    let proxies = bank.proxies();
    let sq: Vec<f64> = proxies.iter_rows().map(|p| squared_distance(x, p)).collect();
    // log-sum-exp over the negatives of -d^2
    let max_neg = sq
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != py)
        .map(|(_, &d)| -d)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = sq
        .iter()
        .enumerate()
        .map(|(i, &d)| if i == py { 0.0 } else { (-d - max_neg).exp() })
        .collect();
    let total: f64 = weights.iter().sum();
    let loss = sq[py] + max_neg + total.ln();

    let dim = x.len();
    let mut grad_x: Vec<f64> = (0..dim).map(|k| 2.0 * (x[k] - proxies[(py, k)])).collect();
    let mut grad_proxies = Matrix::zeros(proxies.rows(), dim);
    for k in 0..dim {
        grad_proxies[(py, k)] = -2.0 * (x[k] - proxies[(py, k)]);
    }
    for (z, &w) in weights.iter().enumerate() {
        if z == py {
            continue;
        }
        let w = w / total;
        for k in 0..dim {
            let diff = x[k] - proxies[(z, k)];
            grad_x[k] -= 2.0 * w * diff;
            grad_proxies[(z, k)] = 2.0 * w * diff;
        }
    }
    Ok(ProxyOutput {
        loss,
        grad_x,
        grad_proxies,
    })
}

/// Anchor, positive, negative positions within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub a: usize,
    pub p: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub relation: Relation,
}

/// Mined training tuples for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Tuples {
    Triplets(Vec<Triplet>),
    Pairs(Vec<Pair>),
    /// Every sample contributes on its own (Proxy-NCA).
    Points,
}

impl Tuples {
    /// Margin-loss pairs: triplets contribute `(a, p)` and `(a, n)`.
    pub fn to_pairs(&self) -> Vec<Pair> {
        match self {
            Tuples::Pairs(p) => p.clone(),
            Tuples::Triplets(ts) => ts
                .iter()
                .flat_map(|t| {
                    [
                        Pair {
                            i: t.a,
                            j: t.p,
                            relation: Relation::Positive,
                        },
                        Pair {
                            i: t.a,
                            j: t.n,
                            relation: Relation::Negative,
                        },
                    ]
                })
                .collect(),
            Tuples::Points => Vec::new(),
        }
    }
}

/// Margin boundaries: one shared value, or one per dense class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub mode: BetaMode,
    pub values: Vec<f64>,
}

impl Betas {
    pub fn new(mode: BetaMode, init: f64, num_classes: usize) -> Self {
        let len = match mode {
            BetaMode::Learner => 1,
            BetaMode::Class => num_classes.max(1),
        };
        Betas {
            mode,
            values: vec![init; len],
        }
    }

    pub fn index(&self, class: usize) -> usize {
        match self.mode {
            BetaMode::Learner => 0,
            BetaMode::Class => class,
        }
    }

    pub fn get(&self, class: usize) -> f64 {
        self.values[self.index(class)]
    }

    /// Plain gradient step; the boundary is kept strictly positive.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        for (b, g) in self.values.iter_mut().zip(grad) {
            *b = (*b - lr * g).max(1e-6);
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    /// Gradient per batch embedding, one row each.
    pub grads: Matrix,
    /// Same layout as `Betas::values`; all zero unless margin loss.
    pub beta_grad: Vec<f64>,
    /// Same layout as the proxy bank; present for Proxy-NCA.
    pub proxy_grad: Option<Matrix>,
    /// Number of terms averaged. Zero marks a degenerate batch.
    pub terms: usize,
}

/// Auxiliary parameters some losses need.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParams<'a> {
    pub betas: Option<&'a Betas>,
    pub proxies: Option<&'a ProxyBank>,
}

/// Mean loss over the mined tuples and the gradient of that mean w.r.t.
/// every batch embedding.
pub fn batch_loss(
    embeddings: &Matrix,
    labels: &[usize],
    config: &LossConfig,
    tuples: &Tuples,
    params: LossParams<'_>,
) -> Result<BatchLoss> {
    let n = embeddings.rows();
    let dim = embeddings.cols();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    let mut grads = Matrix::zeros(n, dim);
    let beta_len = params.betas.map_or(0, |b| b.values.len());
    let mut beta_grad = vec![0.0; beta_len];
    let check = |i: usize| {
        if i >= n {
            Err(Error::shape(format!("tuple index {i} outside batch of {n}")))
        } else {
            Ok(())
        }
    };
    let add = |grads: &mut Matrix, i: usize, g: &[f64]| {
        for (a, b) in grads.row_mut(i).iter_mut().zip(g) {
            *a += b;
        }
    };

    let (total, terms, proxy_grad) = match config.kind {
        LossKind::Triplet => {
            let Tuples::Triplets(ts) = tuples else {
                return Err(Error::config("triplet loss needs mined triplets"));
            };
            let mut total = 0.0;
            for t in ts {
                check(t.a)?;
                check(t.p)?;
                check(t.n)?;
                let out = triplet_loss(
                    embeddings.row(t.a),
                    embeddings.row(t.p),
                    embeddings.row(t.n),
                    config.alpha,
                );
                total += out.loss;
                add(&mut grads, t.a, &out.grad_a);
                add(&mut grads, t.p, &out.grad_p);
                add(&mut grads, t.n, &out.grad_n);
            }
            (total, ts.len(), None)
        }
        LossKind::Margin => {
            let betas = params
                .betas
                .ok_or_else(|| Error::config("margin loss needs beta values"))?;
            let pairs = tuples.to_pairs();
            let mut total = 0.0;
            for pr in &pairs {
                check(pr.i)?;
                check(pr.j)?;
                let bi = betas.index(labels[pr.i]);
                let out = margin_loss(
                    embeddings.row(pr.i),
                    embeddings.row(pr.j),
                    pr.relation,
                    config.alpha,
                    betas.values[bi],
                );
                total += out.loss;
                add(&mut grads, pr.i, &out.grad_i);
                add(&mut grads, pr.j, &out.grad_j);
                beta_grad[bi] += out.grad_beta;
            }
            (total, pairs.len(), None)
        }
        LossKind::ProxyNca => {
            let bank = params
                .proxies
                .ok_or_else(|| Error::config("Proxy-NCA loss needs a proxy bank"))?;
            let mut pg = Matrix::zeros(bank.len(), bank.dim());
            if bank.len() < 2 {
                (0.0, 0, Some(pg))
            } else {
                let mut total = 0.0;
                for i in 0..n {
                    let out = proxy_nca_loss(embeddings.row(i), labels[i], bank)?;
                    total += out.loss;
                    add(&mut grads, i, &out.grad_x);
                    for (a, b) in pg.as_mut_slice().iter_mut().zip(out.grad_proxies.as_slice()) {
                        *a += b;
                    }
                }
                (total, n, Some(pg))
            }
        }
    };

    if terms == 0 {
        log::debug!("degenerate batch: no loss terms");
        return Ok(BatchLoss {
            loss: 0.0,
            grads: Matrix::zeros(n, dim),
            beta_grad,
            proxy_grad,
            terms: 0,
        });
    }
    let scale = 1.0 / terms as f64;
    grads.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
    beta_grad.iter_mut().for_each(|g| *g *= scale);
    let proxy_grad = proxy_grad.map(|mut m| {
        m.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
        m
    });
    Ok(BatchLoss {
        loss: total * scale,
        grads,
        beta_grad,
        proxy_grad,
        terms,
    })
}
