//! Correlation-aware learning for long-tailed, fine-grained classification.
//!
//! - [`lattice`]: static and adaptive class-correlation lattices.
//! - [`losses`]: re-weighted, label-softened and hinge losses with analytic gradients.
//! - [`metrics`]: confusion, recall families and discriminatory power.
//! - [`model`]: a small softmax classifier and its SGD loop.
//! - [`data`]: synthetic long-tailed data and CSV ingest.
//! - [`experiment`]: the baseline-then-train pipeline and multi-seed benchmark.

pub mod data;
pub mod error;
pub mod experiment;
pub mod lattice;
pub mod losses;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
pub use lattice::{
    build_lattice, AdaptiveLattice, BatchPredictions, ClassDistribution, Lattice,
};
pub use losses::{LossConfig, LossMode, LossValue, Objective, WeightTable};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use model::{Checkpoint, Classifier, TrainConfig};
