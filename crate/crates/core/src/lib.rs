//! Continual learning with an auxiliary network.
//!
//! A small fully connected classifier is trained on a sequence of tasks.
//! Besides the usual regularizer toward the previous model, the auxiliary
//! objective adds a second regularizer toward a network trained only on the
//! current task. The crate provides the network, synthetic task sequences,
//! importance estimators, the objectives, exemplar replay, the training
//! loop, the stability/plasticity analyses and numerical oracles for the
//! closed-form results.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod importance;
pub mod losses;
pub mod mutation;
pub mod nn;
pub mod oracle;
pub mod replay;
pub mod tasks;
pub mod trainer;

pub use checkpoint::{CheckpointFile, CheckpointStore};
pub use error::{Error, Result};
pub use importance::{ImportanceMap, ImportanceSource};
pub use losses::{LossSpec, MethodId, Mode};
pub use nn::{ArchSpec, Head, HeadMode, WeightVector};
pub use tasks::{AccuracyMatrix, HeadPolicy, TaskDataset, TaskSequence};
pub use trainer::{RunRecord, TrainConfig};
