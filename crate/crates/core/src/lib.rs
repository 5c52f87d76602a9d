//! Semi-supervised Vision Transformer training with a parallel masked-autoencoder
//! reconstruction branch.
//!
//! The crate is `no_std` (with `alloc`). It contains everything that is pure
//! computation: the transformer with hand-written backward passes, the
//! masking/decoding branch, the pseudo-labelling objective, the optimizer and
//! learning-rate schedule, augmentation operators, and the batch pipeline.
//! File formats, the CLI and the training driver live in the `semimae` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod augment;
pub mod config;
pub mod data;
mod error;
pub mod mae;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod patch;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use mae::{MaskPlan, Reconstruction};
pub use objective::{LossBreakdown, PseudoLabel};
pub use patch::PatchGrid;
pub use rng::{RngStreams, Stream};
pub use tensor::Images;
pub use train::{Model, RunState, Trainer};
pub use vit::{Logits, Mode, TokenSequence};
