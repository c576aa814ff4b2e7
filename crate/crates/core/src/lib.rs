//! Fairness-oriented channel pruning.
//!
//! Channels of a convolutional layer are scored by how well their feature
//! maps separate two sensitive groups (a soft nearest neighbour loss over
//! the sensitive labels), the most group-separating ones are removed, the
//! network is fine-tuned, and the fairness/accuracy trade-off is measured
//! with equal-opportunity and equalized-odds gaps and the FATE score.
//!
//! * [`nn`]: tensor engine, toy CNN, gradients, structural pruning, checkpoints
//! * [`snnl`]: per-channel entanglement scores
//! * [`fairness`]: confusion tensors, Eopp/Eodd, per-group P/R/F1, FATE
//! * [`recipe`]: the iterative prune-and-fine-tune loop and ablation sweeps
//! * [`data`]: synthetic biased data and file formats

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod container;
pub mod data;
pub mod error;
pub mod fairness;
pub mod fmt;
pub mod nn;
pub mod recipe;
pub mod snnl;
pub mod tensor;

pub use data::{Dataset, FeatureMaps, Predictions, Split, SyntheticConfig};
pub use error::{Error, ErrorClass, Result};
pub use fairness::{ConfusionTensor, FairnessReport, MetricsSummary};
pub use nn::{Architecture, Checkpoint, SampleBatch, ToyCnn};
pub use recipe::{RecipeConfig, RecipeTrace, StopReason};
pub use snnl::ChannelScoreTable;
pub use tensor::Tensor;

/// Toolkit version recorded in manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
