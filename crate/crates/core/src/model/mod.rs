//! End-to-end segmentation model under one of seven fine-tuning modes.

mod checkpoint;
mod mode;
mod seg;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use mode::FineTuneMode;
pub use seg::{GateOverride, SegModel, CHANNELS};
