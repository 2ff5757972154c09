//! Unsupervised similarity learning between exemplars.
//!
//! The pipeline starts from whitened-feature similarities, grows compact
//! cliques of mutually similar samples, packs mutually dissimilar cliques into
//! training batches by solving a relaxed quadratic assignment problem with the
//! concave-convex procedure, trains a small embedding network to classify
//! samples into their cliques, and re-imputes similarities from the learned
//! representation. The last three steps alternate for a few rounds.
//!
//! Modules map onto the stages:
//!
//! * [`dataset`]: feature ingestion, evaluation annotations, synthetic fixtures
//! * [`similarity`]: whitening, kernels, reliability bands, spectrum diagnostics
//! * [`cliques`]: complete-linkage clique growth and farthest-neighbor merging
//! * [`batchopt`]: clique-to-batch assignment (CCCP solver and exhaustive oracle)
//! * [`trainer`]: one-hidden-layer softmax classifier with momentum SGD
//! * [`pipeline`]: alternating rounds with on-disk artifacts
//! * [`eval`]: ROC/AUC retrieval evaluation and batch reliability counts

pub mod batchopt;
pub mod cliques;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rng;
pub mod similarity;
pub mod trainer;

pub use error::{Error, Result};
