//! Trainable embedding network.
//!
//! `x -> relu(A x + b) -> W h -> normalize`. The adapter `(A, b)` is the
//! shared representation updated by every learner; `W` is the embedding
//! layer, cut into `K` contiguous row blocks, one per learner.
//!
//! Normalization: a learner's sub-embedding is its row block of `W h`,
//! normalized on its own. The full embedding is the concatenation of all
//! normalized sub-embeddings scaled by `1/sqrt(K)`, which is unit length.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// One learner's block of embedding dimensions, `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerSlice {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl LearnerSlice {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// The `K` equal slices of a `dim`-dimensional embedding.
pub fn slices_of(dim: usize, num_learners: usize) -> Result<Vec<LearnerSlice>> {
    if num_learners == 0 || dim % num_learners != 0 {
        return Err(Error::config(format!(
            "embedding dimension {dim} is not divisible by K={num_learners}"
        )));
    }
    let w = dim / num_learners;
    Ok((0..num_learners)
        .map(|k| LearnerSlice {
            index: k,
            start: k * w,
            end: (k + 1) * w,
        })
        .collect())
}

/// Normalizes `z[range]` on its own.
pub fn normalize_slice(z: &[f64], range: Range<usize>) -> Result<Vec<f64>> {
    let part = &z[range.clone()];
    let n = norm(part);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "pre-normalization output is zero on dimensions {range:?}"
        )));
    }
    Ok(part.iter().map(|v| v / n).collect())
}

/// Per-slice normalization of `z` with `parts` equal slices, concatenated
/// and scaled by `1/sqrt(parts)`.
pub fn merge_normalize(z: &[f64], parts: usize) -> Result<Vec<f64>> {
    let slices = slices_of(z.len(), parts)?;
    let scale = 1.0 / (parts as f64).sqrt();
    let mut out = Vec::with_capacity(z.len());
    for s in slices {
        out.extend(normalize_slice(z, s.range())?.into_iter().map(|v| v * scale));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// `h x m`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    /// `d x h`, no bias.
    weight: Matrix,
    adapter: Option<Adapter>,
    input_dim: usize,
    num_learners: usize,
}

/// Gradients of a scalar loss with respect to the model parameters.
///
/// `weight` always has the full `d x h` shape; rows outside `rows` are
/// exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight: Matrix,
    pub rows: Range<usize>,
    pub adapter_weight: Option<Matrix>,
    pub adapter_bias: Option<Vec<f64>>,
}

impl EmbeddingModel {
    /// Random model: embedding weights `N(0, 1/h)`, adapter near identity.
    ///
    /// `adapter_hidden = None` disables the adapter (then `h = m`).
    pub fn new_random<R: Rng>(
        input_dim: usize,
        dim: usize,
        num_learners: usize,
        adapter_hidden: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || dim == 0 {
            return Err(Error::config("input and embedding dimensions must be >= 1"));
        }
        slices_of(dim, num_learners)?;
        let hidden = adapter_hidden.unwrap_or(input_dim);
        if hidden == 0 {
            return Err(Error::config("adapter hidden width must be >= 1"));
        }
        let adapter = adapter_hidden.map(|h| {
            let mut w = Matrix::zeros(h, input_dim);
            for v in w.as_mut_slice() {
                *v = 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
            for i in 0..h.min(input_dim) {
                w[(i, i)] += 1.0;
            }
            Adapter {
                weight: w,
                bias: vec![0.0; h],
            }
        });
        let std = 1.0 / (hidden as f64).sqrt();
        let mut weight = Matrix::zeros(dim, hidden);
        for v in weight.as_mut_slice() {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(EmbeddingModel {
            weight,
            adapter,
            input_dim,
            num_learners,
        })
    }

    pub fn from_parts(
        weight: Matrix,
        adapter: Option<Adapter>,
        input_dim: usize,
        num_learners: usize,
    ) -> Result<Self> {
        slices_of(weight.rows(), num_learners)?;
        match &adapter {
            Some(a) => {
                if a.weight.cols() != input_dim
                    || a.weight.rows() != weight.cols()
                    || a.bias.len() != a.weight.rows()
                {
                    return Err(Error::shape(format!(
                        "adapter {}x{} (bias {}) does not fit input {input_dim} / hidden {}",
                        a.weight.rows(),
                        a.weight.cols(),
                        a.bias.len(),
                        weight.cols()
                    )));
                }
            }
            None => {
                if weight.cols() != input_dim {
                    return Err(Error::shape(format!(
                        "embedding weight has {} columns but the input has {input_dim}",
                        weight.cols()
                    )));
                }
            }
        }
        let model = EmbeddingModel {
            weight,
            adapter,
            input_dim,
            num_learners,
        };
        if !model.is_finite() {
            return Err(Error::data("model parameters must be finite"));
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_learners(&self) -> usize {
        self.num_learners
    }

    pub fn uses_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut Adapter> {
        self.adapter.as_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite()
            && self.adapter.as_ref().is_none_or(|a| {
                a.weight.is_finite() && a.bias.iter().all(|v| v.is_finite())
            })
    }

    pub fn slices(&self) -> Vec<LearnerSlice> {
        // Divisibility is checked at construction.
        slices_of(self.dim(), self.num_learners).expect("valid slicing")
    }

    pub fn slice(&self, k: usize) -> Result<LearnerSlice> {
        self.slices().get(k).copied().ok_or_else(|| {
            Error::config(format!(
                "learner {k} out of range for K={}",
                self.num_learners
            ))
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("input contains non-finite values"));
        }
        Ok(())
    }

    /// Shared representation `h` and, with the adapter on, its pre-activation.
    fn hidden(&self, x: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
        match &self.adapter {
            None => (x.to_vec(), None),
            Some(a) => {
                let pre: Vec<f64> = a
                    .weight
                    .iter_rows()
                    .zip(&a.bias)
                    .map(|(r, b)| dot(r, x) + b)
                    .collect();
                let h = pre.iter().map(|&v| v.max(0.0)).collect();
                (h, Some(pre))
            }
        }
    }

    /// Unnormalized embedding-layer output `W h`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (h, _) = self.hidden(x);
        Ok(self.weight.matvec(&h))
    }

    /// Learner `k`'s normalized sub-embedding, or the merged full embedding
    /// when `slice` is `None`.
    pub fn forward(&self, x: &[f64], slice: Option<LearnerSlice>) -> Result<Vec<f64>> {
        let z = self.project(x)?;
        match slice {
            Some(s) => {
                self.check_slice(s)?;
                normalize_slice(&z, s.range())
            }
            None => merge_normalize(&z, self.num_learners),
        }
    }

    pub fn merge_and_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, None)
    }

    fn check_slice(&self, s: LearnerSlice) -> Result<()> {
        if self.slice(s.index)? != s {
            return Err(Error::config(format!(
                "slice {s:?} does not belong to a model with d={} and K={}",
                self.dim(),
                self.num_learners
            )));
        }
        Ok(())
    }

    /// Unnormalized outputs for every row of `features`.
    pub fn project_all(&self, features: &Matrix) -> Result<Matrix> {
        let rows: Result<Vec<Vec<f64>>> = (0..features.rows())
            .into_par_iter()
            .map(|i| self.project(features.row(i)))
            .collect();
        Matrix::from_rows(&rows?)
    }

    /// Embeddings for every row of `features`.
    pub fn embed_all(&self, features: &Matrix, slice: Option<LearnerSlice>) -> Result<Matrix> {
        let rows: Result<Vec<Vec<f64>>> = (0..features.rows())
            .into_par_iter()
            .map(|i| self.forward(features.row(i), slice))
            .collect();
        Matrix::from_rows(&rows?)
    }

    /// Backpropagates `grad_out` (one row per input, matching the forward
    /// output for `slice`) to the parameters. Only the slice's rows of `W`
    /// (all rows when `slice` is `None`) and the adapter receive gradient.
    pub fn backward(
        &self,
        inputs: &[&[f64]],
        grad_out: &Matrix,
        slice: Option<LearnerSlice>,
    ) -> Result<Gradients> {
        if let Some(s) = slice {
            self.check_slice(s)?;
        }
        let active: Vec<LearnerSlice> = match slice {
            Some(s) => vec![s],
            None => self.slices(),
        };
        let out_dim: usize = active.iter().map(LearnerSlice::len).sum();
        if grad_out.rows() != inputs.len() || grad_out.cols() != out_dim {
            return Err(Error::shape(format!(
                "gradient is {}x{}, expected {}x{out_dim}",
                grad_out.rows(),
                grad_out.cols(),
                inputs.len()
            )));
        }
        let rows = match slice {
            Some(s) => s.range(),
            None => 0..self.dim(),
        };
        let scale = match slice {
            Some(_) => 1.0,
            None => 1.0 / (self.num_learners as f64).sqrt(),
        };
        let h_dim = self.hidden_dim();
        let mut gw = Matrix::zeros(self.dim(), h_dim);
        let mut ga = self.adapter.as_ref().map(|a| Matrix::zeros(a.weight.rows(), a.weight.cols()));
        let mut gb = self.adapter.as_ref().map(|a| vec![0.0; a.bias.len()]);

        for (x, g_row) in inputs.iter().zip(grad_out.iter_rows()) {
            self.check_input(x)?;
            let (h, pre) = self.hidden(x);
            let z = self.weight.matvec(&h);
            // dL/dz on the active rows, through v = z_s / |z_s| for each slice.
            let mut gz = vec![0.0; self.dim()];
            let mut offset = 0;
            for s in &active {
                let zs = &z[s.range()];
                let n = norm(zs);
                if n == 0.0 {
                    return Err(Error::Degenerate(format!(
                        "pre-normalization output is zero on dimensions {:?}",
                        s.range()
                    )));
                }
                let gs = &g_row[offset..offset + s.len()];
                let proj: f64 = zs.iter().zip(gs).map(|(zv, gv)| zv / n * gv * scale).sum();
                for (j, r) in s.range().enumerate() {
                    let v = zs[j] / n;
                    gz[r] = (gs[j] * scale - v * proj) / n;
                }
                offset += s.len();
            }
            for r in rows.clone() {
                let g = gz[r];
                if g != 0.0 {
                    for (w, hv) in gw.row_mut(r).iter_mut().zip(&h) {
                        *w += g * hv;
                    }
                }
            }
            if let (Some(pre), Some(ga), Some(gb)) = (pre, ga.as_mut(), gb.as_mut()) {
                for (i, &p) in pre.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    let gh: f64 = rows.clone().map(|r| self.weight[(r, i)] * gz[r]).sum();
                    gb[i] += gh;
                    for (a, xv) in ga.row_mut(i).iter_mut().zip(x.iter()) {
                        *a += gh * xv;
                    }
                }
            }
        }
        Ok(Gradients {
            weight: gw,
            rows,
            adapter_weight: ga,
            adapter_bias: gb,
        })
    }
}

/// Euclidean distance between two embeddings.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cannot compare embeddings of dimension {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(crate::linalg::squared_distance(a, b).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one flat parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam state for a whole model, one parameter group per learner slice
/// plus the adapter. A step on learner `k` touches only group `k` and the
/// adapter, so other slices' weights and moments stay bitwise unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOptimizer {
    pub slices: Vec<AdamState>,
    pub adapter_weight: Option<AdamState>,
    pub adapter_bias: Option<AdamState>,
}

impl ModelOptimizer {
    pub fn new(model: &EmbeddingModel, config: AdamConfig) -> Self {
        let per_slice = model.dim() / model.num_learners() * model.hidden_dim();
        ModelOptimizer {
            slices: (0..model.num_learners())
                .map(|_| AdamState::new(per_slice, config))
                .collect(),
            adapter_weight: model
                .adapter()
                .map(|a| AdamState::new(a.weight.as_slice().len(), config)),
            adapter_bias: model.adapter().map(|a| AdamState::new(a.bias.len(), config)),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        let groups = self
            .slices
            .iter_mut()
            .chain(self.adapter_weight.iter_mut())
            .chain(self.adapter_bias.iter_mut());
        for g in groups {
            g.config.lr = lr;
        }
    }

    /// Applies `grads` to the learner groups covered by `grads.rows`.
    pub fn step(&mut self, model: &mut EmbeddingModel, grads: &Gradients) -> Result<()> {
        let slices = model.slices();
        let h = model.hidden_dim();
        for s in slices
            .iter()
            .filter(|s| s.start >= grads.rows.start && s.end <= grads.rows.end)
        {
            let g = grads.weight.row_block(s.start, s.end);
            let p = model.weight.row_block_mut(s.start, s.end);
            debug_assert_eq!(p.len(), s.len() * h);
            adam_step(p, g, &mut self.slices[s.index])?;
        }
        if let Some(a) = model.adapter.as_mut() {
            match (
                &grads.adapter_weight,
                &grads.adapter_bias,
                self.adapter_weight.as_mut(),
                self.adapter_bias.as_mut(),
            ) {
                (Some(gw), Some(gb), Some(sw), Some(sb)) => {
                    adam_step(a.weight.as_mut_slice(), gw.as_slice(), sw)?;
                    adam_step(&mut a.bias, gb, sb)?;
                }
                _ => return Err(Error::shape("adapter gradients or optimizer state missing")),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_model_maps_basis_vector_to_itself() {
        let model = EmbeddingModel::from_parts(Matrix::identity(3), None, 3, 1).unwrap();
        let out = model.forward(&[1.0, 0.0, 0.0], None).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn outputs_are_unit_length() {
        let mut r = rng(3);
        let model = EmbeddingModel::new_random(6, 8, 4, Some(6), &mut r).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
            let full = model.forward(&x, None).unwrap();
            assert!((norm(&full) - 1.0).abs() <= 1e-12);
            for s in model.slices() {
                let v = model.forward(&x, Some(s)).unwrap();
                assert!((norm(&v) - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn slice_forward_matches_direct_arithmetic() {
        let mut r = rng(5);
        let model = EmbeddingModel::new_random(3, 4, 2, None, &mut r).unwrap();
        let x = [0.3, -1.2, 0.7];
        let w = model.weight();
        let rows: Vec<f64> = (2..4)
            .map(|i| (0..3).map(|j| w[(i, j)] * x[j]).sum())
            .collect();
        let n = (rows[0] * rows[0] + rows[1] * rows[1]).sqrt();
        let got = model.forward(&x, Some(model.slice(1).unwrap())).unwrap();
        assert!((got[0] - rows[0] / n).abs() < 1e-14);
        assert!((got[1] - rows[1] / n).abs() < 1e-14);
    }

    #[test]
    fn zero_output_is_an_error() {
        let model = EmbeddingModel::from_parts(Matrix::identity(2), None, 2, 1).unwrap();
        assert!(matches!(
            model.forward(&[0.0, 0.0], None),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&[0.6, 0.8], &[0.6, 0.8]).unwrap(), 0.0);
        assert!((distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(distance(&[0.6, 0.8], &[-0.6, -0.8]).unwrap(), 2.0);
        assert!(distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn merge_with_one_learner_equals_forward() {
        let mut r = rng(8);
        let model = EmbeddingModel::new_random(5, 4, 1, Some(5), &mut r).unwrap();
        let x = [0.5, 1.0, 0.2, 0.9, 1.3];
        let s = model.slice(0).unwrap();
        assert_eq!(model.merge_and_forward(&x).unwrap(), model.forward(&x, Some(s)).unwrap());
    }

    #[test]
    fn merge_is_scaled_concatenation_of_slices() {
        let mut r = rng(9);
        let model = EmbeddingModel::new_random(5, 8, 4, Some(5), &mut r).unwrap();
        let x = [0.5, 1.0, 0.2, 0.9, 1.3];
        let merged = model.merge_and_forward(&x).unwrap();
        let mut manual = Vec::new();
        for s in model.slices() {
            manual.extend(model.forward(&x, Some(s)).unwrap().into_iter().map(|v| v / 2.0));
        }
        for (a, b) in merged.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((norm(&merged) - 1.0).abs() < 1e-12);
        // Restricting the merged vector to a slice and renormalizing gives
        // that learner's own embedding.
        for s in model.slices() {
            let own = model.forward(&x, Some(s)).unwrap();
            let restricted: Vec<f64> = merged[s.range()].iter().map(|v| v * 2.0).collect();
            assert_eq!(restricted, own);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let mut r = rng(10);
        let model = EmbeddingModel::new_random(4, 4, 2, Some(4), &mut r).unwrap();
        let x = [1.0, 0.5, 0.25, 2.0];
        let g = model
            .backward(&[&x], &Matrix::zeros(1, 2), Some(model.slice(0).unwrap()))
            .unwrap();
        assert!(g.weight.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.adapter_weight.unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(g.adapter_bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_only_touches_active_rows() {
        let mut r = rng(11);
        let model = EmbeddingModel::new_random(5, 4, 2, Some(5), &mut r).unwrap();
        let x = [1.0, 0.5, 0.25, 2.0, 1.0];
        let up = Matrix::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let g = model
            .backward(&[&x], &up, Some(model.slice(0).unwrap()))
            .unwrap();
        assert!(g.weight.row_block(2, 4).iter().all(|v| v.to_bits() == 0));
        assert!(g.weight.row_block(0, 2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_shape_mismatch() {
        let mut r = rng(12);
        let model = EmbeddingModel::new_random(3, 4, 2, None, &mut r).unwrap();
        let x = [1.0, 0.5, 0.25];
        assert!(model
            .backward(&[&x], &Matrix::zeros(1, 4), Some(model.slice(0).unwrap()))
            .is_err());
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2, AdamConfig::default());
        adam_step(&mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m_hat = g = 1, v_hat = 1: update = lr * 1 / (1 + eps).
        let mut p = vec![0.0];
        let mut st = AdamState::new(
            1,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        adam_step(&mut p, &[1.0], &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut r = rng(77);
            let mut p: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut st = AdamState::new(10, AdamConfig::default());
            for _ in 0..100 {
                let g: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn optimizer_step_leaves_other_slices_untouched() {
        let mut r = rng(13);
        let mut model = EmbeddingModel::new_random(5, 6, 3, Some(5), &mut r).unwrap();
        let mut opt = ModelOptimizer::new(&model, AdamConfig::default());
        let x = [1.0, 0.5, 0.25, 2.0, 1.0];
        for k in [0, 2, 1, 1, 0] {
            let before = model.weight().clone();
            let s = model.slice(k).unwrap();
            let up = Matrix::from_rows(&[vec![0.4, -0.2]]).unwrap();
            let g = model.backward(&[&x], &up, Some(s)).unwrap();
            opt.step(&mut model, &g).unwrap();
            for other in model.slices().into_iter().filter(|o| o.index != k) {
                let a = before.row_block(other.start, other.end);
                let b = model.weight().row_block(other.start, other.end);
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
