//! Mixture of parameter-efficient fine-tuning methods (LoRA, prefix tuning,
//! adapters) composed by learned sigmoid gates on a small vision-transformer
//! segmentation model.
//!
//! Module map:
//! - [`autodiff`]: tensors, reverse-mode tape, finite-difference oracle
//! - [`layers`]: linear, layer norm, gated-prefix attention, FFN, patch embedding
//! - [`peft`]: LoRA, prefix bank, adapter, parameter accounting
//! - [`gating`]: gate networks and activation telemetry
//! - [`model`]: the seven fine-tuning modes and checkpoints
//! - [`train`]: AdamW, cross-entropy, mIoU, training loop
//! - [`data`]: synthetic tasks, PGM datasets, CSV reports
//! - [`config`]: the `key = value` experiment config

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gating;
pub mod io;
pub mod layers;
pub mod model;
pub mod params;
pub mod peft;
pub mod train;

pub use error::{Error, Result};
