//! Synthetic segmentation domains, the on-disk dataset format and CSV
//! reports.

mod csv;
mod disk;
mod pgm;
mod synth;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Tensor;

pub use csv::{
    fmt_sig6, read_gate_csv, read_metrics_csv, render_gate_csv, render_gate_events_csv,
    render_metrics_csv, write_gate_csv, write_gate_events_csv, write_metrics_csv, GateCsvRow,
    GATE_HEADER, METRICS_HEADER,
};
pub use disk::{load_dataset, load_split, save_dataset, save_split, MANIFEST};
pub use pgm::{parse_pgm, read_pgm, write_pgm, Pgm};
pub use synth::{gen_synthetic, stripe_width, SyntheticTaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Blobs,
    Stripes,
    Rings,
    Checker,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Blobs, Domain::Stripes, Domain::Rings, Domain::Checker];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Blobs => "blobs",
            Domain::Stripes => "stripes",
            Domain::Rings => "rings",
            Domain::Checker => "checker",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown domain `{s}` (expected blobs, stripes, rings or checker)"))
    }
}

/// One square grayscale image and its class mask, both row-major 8-bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub side: usize,
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
}

impl Sample {
    /// `[side x side x 1]`, pixel values scaled to `[0, 1]`.
    pub fn image_tensor(&self) -> Tensor {
        let data = self.image.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(&[self.side, self.side, 1], data).expect("sample extents are valid")
    }

    pub fn targets(&self) -> Vec<usize> {
        self.mask.iter().map(|&c| c as usize).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// A [`Sample`] converted once for the model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: Tensor,
    pub mask: Vec<usize>,
}

impl Prepared {
    pub fn from_samples(samples: &[Sample]) -> Vec<Prepared> {
        samples
            .iter()
            .map(|s| Prepared {
                image: s.image_tensor(),
                mask: s.targets(),
            })
            .collect()
    }
}
