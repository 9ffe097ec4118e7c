//! Divide-and-conquer deep metric learning on precomputed feature vectors.
//!
//! The embedding layer is cut into `K` contiguous slices ("learners"). The
//! training set is clustered with k-means in the current embedding space and
//! each learner is trained only on the samples of its own cluster. Every `T`
//! epochs the data is re-clustered and the new clusters are re-bound to the
//! learners by maximum-IoU linear assignment. Training ends by merging the
//! slices back into one embedding and fine-tuning it on the whole data set.
//!
//! Module map:
//!
//! - [`dataset`]: feature files, class-disjoint splits, synthetic data.
//! - [`embedding`]: adapter + sliced linear layer, gradients, Adam.
//! - [`losses`]: triplet, margin and Proxy-NCA losses with gradients.
//! - [`partition`]: k-means, IoU matching, ablation partitioners.
//! - [`sampling`]: cluster selection, batches, tuple mining.
//! - [`trainer`]: the alternating training loop, fine-tuning, checkpoints.
//! - [`eval`]: Recall@k, NMI, mAP and the learner diagnostics.

pub mod checkpoint;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod partition;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
