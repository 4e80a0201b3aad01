//! Attention refinement by adversarial feedback.
//!
//! A Transformer classifier (the target) exposes the attention row of its
//! last token. A policy masks the highest-attention tokens, a discriminator
//! learns to tell masked from intact sequences, and its confidence becomes a
//! reward that pushes the target's attention toward tokens whose removal is
//! detectable.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod target;
pub mod trainer;
pub mod viz;

pub use config::{ModelConfig, TrainConfig};
pub use corpus::{Batch, Example, PlantedDataset, PlantedSpec, TokenId, Vocab};
pub use discriminator::Discriminator;
pub use error::{AfaError, Result};
pub use evaluation::{DeletionCurve, Metrics, SweepRecord, SweepResult};
pub use masking::{MaskSelection, SelectionMode};
pub use nn::{EncoderDims, Mode};
pub use target::{TargetDims, TargetModel};
pub use trainer::{FitOptions, History, StepReport, Trainer};
