//! Sigmoid gate networks and their activation telemetry.
//!
//! Each gate reads the block input `h_in`, mean-pools it over tokens and
//! maps it through `D -> D_g -> 1` with a GELU in between. The output layer
//! starts at zero, so a fresh gate returns exactly 0.5.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::params::{Component, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GateMethod {
    Lora,
    Prefix,
    Adapter,
}

impl GateMethod {
    pub const ALL: [GateMethod; 3] = [GateMethod::Lora, GateMethod::Prefix, GateMethod::Adapter];

    pub fn name(self) -> &'static str {
        match self {
            GateMethod::Lora => "lora",
            GateMethod::Prefix => "prefix",
            GateMethod::Adapter => "adapter",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for GateMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        GateMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown gate method `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct GateNet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub method: GateMethod,
    /// `None` for a gate shared by all layers.
    pub layer: Option<usize>,
}

impl GateNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        layer: Option<usize>,
        method: GateMethod,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let name = match layer {
            Some(l) => format!("gates.{l}.{method}"),
            None => format!("gates.shared.{method}"),
        };
        let fc1 = Linear::new(
            store,
            &format!("{name}.fc1"),
            Component::Gate,
            dim,
            hidden,
            Init::Fan,
            rng,
        );
        let fc2 = Linear::new(
            store,
            &format!("{name}.fc2"),
            Component::Gate,
            hidden,
            1,
            Init::Zeros,
            rng,
        );
        Self {
            fc1,
            fc2,
            method,
            layer,
        }
    }

    /// Pre-sigmoid logit as a `[1 x 1]` node.
    pub fn logit(&self, g: &mut Graph, store: &ParamStore, h_in: Var) -> Result<Var> {
        let pooled = g.mean_rows(h_in);
        let h = self.fc1.forward(g, store, pooled)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }

    /// `sigmoid(fc2(gelu(fc1(mean_tokens(h_in)))))`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_in: Var) -> Result<Var> {
        let z = self.logit(g, store, h_in)?;
        Ok(g.sigmoid(z))
    }
}

/// `s = g * alpha_base / r`
pub fn lora_effective_scale(gate: f64, alpha_base: f64, rank: usize) -> f64 {
    gate * alpha_base / rank as f64
}

/// Gate outputs for one sample: `values[layer][method.index()]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GateValues {
    pub values: Vec<[f64; 3]>,
}

impl GateValues {
    pub fn get(&self, layer: usize, method: GateMethod) -> f64 {
        self.values[layer][method.index()]
    }

    pub fn layers(&self) -> usize {
        self.values.len()
    }

    pub fn mean(&self, method: GateMethod) -> f64 {
        let n = self.values.len().max(1) as f64;
        self.values.iter().map(|v| v[method.index()]).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateRecord {
    pub sample: usize,
    pub layer: usize,
    pub method: GateMethod,
    pub value: f64,
}

/// Append-only set of gate activations keyed by `(sample, layer, method)`.
/// Iteration is sample-major, then layer, then method.
#[derive(Debug, Clone, Default)]
pub struct GateTelemetry {
    records: BTreeMap<(usize, usize, GateMethod), f64>,
}

impl GateTelemetry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_activation(
        &mut self,
        sample: usize,
        layer: usize,
        method: GateMethod,
        value: f64,
    ) -> Result<()> {
        if !(value > 0.0 && value < 1.0) {
            return Err(Error::GateOutOfRange {
                sample,
                layer,
                method: method.name(),
                value,
            });
        }
        match self.records.entry((sample, layer, method)) {
            std::collections::btree_map::Entry::Occupied(_) => Err(Error::DuplicateRecord {
                sample,
                layer,
                method: method.name(),
            }),
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(value);
                Ok(())
            }
        }
    }

    /// Records every gate of one sample.
    pub fn record_sample(&mut self, sample: usize, values: &GateValues) -> Result<()> {
        for (layer, row) in values.values.iter().enumerate() {
            for m in GateMethod::ALL {
                self.record_activation(sample, layer, m, row[m.index()])?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = GateRecord> + '_ {
        self.records
            .iter()
            .map(|(&(sample, layer, method), &value)| GateRecord {
                sample,
                layer,
                method,
                value,
            })
    }

    pub fn samples(&self) -> usize {
        let mut ids: Vec<usize> = self.records.keys().map(|k| k.0).collect();
        ids.dedup();
        ids.len()
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.records.keys().map(|k| k.1).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }
}

/// How often each method was "called" (gate above threshold).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionCounts {
    pub threshold: f64,
    pub total_samples: usize,
    /// `(layer, method) -> count`, including zero counts.
    pub per_layer: BTreeMap<(usize, GateMethod), usize>,
    /// Summed over layers.
    pub overall: [usize; 3],
    /// Samples where the method was called on at least one layer.
    pub per_image: [usize; 3],
}

impl SelectionCounts {
    pub fn layers(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.per_layer.keys().map(|k| k.0).collect();
        ls.dedup();
        ls
    }

    pub fn count(&self, layer: usize, method: GateMethod) -> usize {
        self.per_layer.get(&(layer, method)).copied().unwrap_or(0)
    }

    pub fn overall(&self, method: GateMethod) -> usize {
        self.overall[method.index()]
    }
}

pub fn selection_counts(telemetry: &GateTelemetry, tau: f64) -> Result<SelectionCounts> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("threshold {tau} outside [0, 1]")));
    }
    let mut out = SelectionCounts {
        threshold: tau,
        total_samples: telemetry.samples(),
        ..Default::default()
    };
    let mut hit_images: BTreeMap<(usize, GateMethod), ()> = BTreeMap::new();
    for r in telemetry.records() {
        let slot = out.per_layer.entry((r.layer, r.method)).or_insert(0);
        if r.value > tau {
            *slot += 1;
            out.overall[r.method.index()] += 1;
            hit_images.insert((r.sample, r.method), ());
        }
    }
    for (_, m) in hit_images.keys() {
        out.per_image[m.index()] += 1;
    }
    Ok(out)
}
