//! Meta-learned in-context classification on embedded datasets.
//!
//! The crate is organized around a small number of subsystems:
//!
//! - [`data`]: dataset records, class-disjoint splits, leave-one-out
//!   partitions and deterministic synthetic multi-domain generation.
//! - [`episodes`]: N-way K-shot episode sampling (single-dataset and
//!   merged modes), sequence assembly and context-label corruption.
//! - [`unsup`]: pseudo-labeled episode generation from unlabeled data
//!   via embedding-space augmentations and mixup queries.
//! - [`net`]: the differentiable model (label encoder, non-causal
//!   transformer encoder, classification head) with explicit
//!   reverse-mode gradients, Adam and a warmup-cosine schedule.
//! - [`train`]: the offline, sequential and unsupervised training
//!   loops, evaluation, and binary checkpoints.
//! - [`curricula`]: difficulty probes, label-Gaussian optimal-transport
//!   dataset distances and the dataset-ordering constructors.
//! - [`metrics`]: accuracy aggregation, backward transfer and
//!   forgetting heatmaps.
//! - [`audit`]: label normalization and class-overlap analysis.
//! - [`report`]: run configs, reports and plot-data emission.

pub mod audit;
pub mod curricula;
pub mod data;
pub mod episodes;
pub mod error;
pub mod metrics;
pub mod net;
pub mod report;
pub mod seeding;
pub mod train;
pub mod unsup;

pub use error::{Error, Result};
