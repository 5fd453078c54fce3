//! Patch-transformer anomaly detection and localization: a dense-tensor
//! autodiff core, the encoder/decoder network with a Gaussian mixture
//! density head, training and checkpointing, dataset ingestion and
//! generation, and the evaluation harness (region-overlap curve, ROC/PR
//! AUC, heatmap export).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod mdn;
pub mod metrics;
pub mod model;
mod parallel;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use mdn::{MdnHead, MixtureParams};
pub use metrics::{BinaryMask, Heatmap, NormStats, ProCurve};
pub use model::{EncodedPatches, Model, ModelConfig, PatchGrid};
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
pub use trainer::{Adam, TrainConfig};
