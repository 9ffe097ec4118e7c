pub mod ablate;
pub mod eval;
pub mod report;
pub mod synth;
pub mod train;

use dce_core::dataset::FeatureDataset;
use dce_core::embedding::EmbeddingModel;
use dce_core::eval::{evaluate, evaluate_as_slices, EvalOptions, MetricReport};

/// Metrics of `model` on `ds`. An unsplit model trained alongside `k`
/// learners is read as `k` slices so its diagnostics are comparable.
pub fn evaluate_model(
    model: &EmbeddingModel,
    k: usize,
    ds: &FeatureDataset,
    opts: &EvalOptions,
) -> dce_core::Result<MetricReport> {
    if model.num_learners() == 1 && k > 1 && model.dim() % k == 0 {
        evaluate_as_slices(model, ds.features(), ds.labels(), k, None, opts)
    } else {
        evaluate(model, ds.features(), ds.labels(), None, opts)
    }
}
