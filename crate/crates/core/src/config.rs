//! Experiment configuration: a line-based `key = value` file with
//! `[section]` headers, plus `section.key=value` overrides.
//!
//! Top-level keys (`seed`, `out_dir`) appear before the first header.
//! Unknown keys are rejected, every value is range-checked, and
//! [`ExperimentConfig::canonical`] prints a stable form that parses back to
//! the same config.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::model::FineTuneMode;
use crate::peft::LoraTargets;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub image: usize,
    pub classes: usize,
    pub prompt_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 4,
            patch: 4,
            image: 32,
            classes: 4,
            prompt_tokens: 4,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |s: String| Err(Error::InvalidConfig(s));
        if self.dim < 2 {
            return err(format!("model.dim must be >= 2, got {}", self.dim));
        }
        if self.layers == 0 {
            return err("model.layers must be >= 1".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return err(format!(
                "model.heads ({}) must divide model.dim ({})",
                self.heads, self.dim
            ));
        }
        if self.patch == 0 || self.image == 0 || self.image % self.patch != 0 {
            return err(format!(
                "model.patch ({}) must divide model.image ({})",
                self.patch, self.image
            ));
        }
        if self.classes < 2 || self.classes > 256 {
            return err(format!("model.classes must be in [2, 256], got {}", self.classes));
        }
        if self.prompt_tokens == 0 {
            return err("model.prompt_tokens must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeftConfig {
    pub mode: FineTuneMode,
    pub rank: usize,
    pub alpha_base: f64,
    pub prefix_len: usize,
    pub d_mid: usize,
    pub lora_targets: LoraTargets,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            mode: FineTuneMode::MoPeft,
            rank: 8,
            alpha_base: 16.0,
            prefix_len: 20,
            d_mid: 64,
            lora_targets: LoraTargets::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub threshold: f64,
    pub per_layer: bool,
    pub hidden: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            per_layer: true,
            hidden: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch: 4,
            steps: 200,
            eval_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Dir,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub domain: Domain,
    pub sigma: f64,
    pub train_n: usize,
    pub val_n: usize,
    /// Dataset directory (with `train/` and `val/`) when `source = dir`.
    pub path: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            domain: Domain::Blobs,
            sigma: 0.05,
            train_n: 32,
            val_n: 8,
            path: String::new(),
        }
    }
}

/// The full, validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub peft: PeftConfig,
    pub gate: GateConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/default".into(),
            model: ModelConfig::default(),
            peft: PeftConfig::default(),
            gate: GateConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "model.dim",
    "model.layers",
    "model.heads",
    "model.patch",
    "model.image",
    "model.classes",
    "model.prompt_tokens",
    "peft.mode",
    "peft.rank",
    "peft.alpha_base",
    "peft.prefix_len",
    "peft.d_mid",
    "peft.lora_targets",
    "gate.threshold",
    "gate.per_layer",
    "gate.hidden",
    "train.lr",
    "train.weight_decay",
    "train.batch",
    "train.steps",
    "train.eval_every",
    "data.source",
    "data.domain",
    "data.sigma",
    "data.train_n",
    "data.val_n",
    "data.path",
];

fn value_err(key: &str, value: &str, reason: impl Into<String>) -> Error {
    Error::ConfigValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn parse_typed<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| value_err(key, value, format!("expected {what}")))
}

fn parse_count(key: &str, value: &str, min: usize) -> Result<usize> {
    let v: usize = parse_typed(key, value, "a non-negative integer")?;
    if v < min {
        return Err(value_err(key, value, format!("must be >= {min}")));
    }
    Ok(v)
}

fn parse_float(key: &str, value: &str, min: f64, max: f64) -> Result<f64> {
    let v: f64 = parse_typed(key, value, "a number")?;
    if !v.is_finite() || v < min || v > max {
        return Err(value_err(key, value, format!("must be in [{min}, {max}]")));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(value_err(key, value, "expected true or false")),
    }
}

impl ExperimentConfig {
    /// Parses a config file, then applies `overrides` (`section.key=value`).
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::ConfigSyntax {
                    line: lineno + 1,
                    reason: format!("unterminated section header `{line}`"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
                line: lineno + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            cfg.set(&full, value.trim())?;
        }
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| Error::ConfigSyntax {
                line: 0,
                reason: format!("override `{ov}` is not `section.key=value`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value with per-key type and range
    /// checks. Cross-key constraints are checked by [`Self::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_typed(key, value, "an unsigned integer")?,
            "out_dir" => {
                if value.is_empty() {
                    return Err(value_err(key, value, "must not be empty"));
                }
                self.out_dir = value.to_string();
            }
            "model.dim" => self.model.dim = parse_count(key, value, 2)?,
            "model.layers" => self.model.layers = parse_count(key, value, 1)?,
            "model.heads" => self.model.heads = parse_count(key, value, 1)?,
            "model.patch" => self.model.patch = parse_count(key, value, 1)?,
            "model.image" => self.model.image = parse_count(key, value, 1)?,
            "model.classes" => {
                let c = parse_count(key, value, 2)?;
                if c > 256 {
                    return Err(value_err(key, value, "must be <= 256 (8-bit masks)"));
                }
                self.model.classes = c;
            }
            "model.prompt_tokens" => self.model.prompt_tokens = parse_count(key, value, 1)?,
            "peft.mode" => {
                self.peft.mode = value
                    .parse()
                    .map_err(|e: String| value_err(key, value, e))?
            }
            "peft.rank" => self.peft.rank = parse_count(key, value, 1)?,
            "peft.alpha_base" => {
                let a = parse_float(key, value, 0.0, f64::MAX)?;
                if a <= 0.0 {
                    return Err(value_err(key, value, "must be > 0"));
                }
                self.peft.alpha_base = a;
            }
            "peft.prefix_len" => self.peft.prefix_len = parse_count(key, value, 1)?,
            "peft.d_mid" => self.peft.d_mid = parse_count(key, value, 1)?,
            "peft.lora_targets" => {
                self.peft.lora_targets = value
                    .parse()
                    .map_err(|e: String| value_err(key, value, e))?
            }
            "gate.threshold" => self.gate.threshold = parse_float(key, value, 0.0, 1.0)?,
            "gate.per_layer" => self.gate.per_layer = parse_bool(key, value)?,
            "gate.hidden" => self.gate.hidden = parse_count(key, value, 1)?,
            "train.lr" => self.train.lr = parse_float(key, value, 0.0, 10.0)?,
            "train.weight_decay" => self.train.weight_decay = parse_float(key, value, 0.0, 1.0)?,
            "train.batch" => self.train.batch = parse_count(key, value, 1)?,
            "train.steps" => self.train.steps = parse_count(key, value, 0)?,
            "train.eval_every" => self.train.eval_every = parse_count(key, value, 1)?,
            "data.source" => {
                self.data.source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "dir" => DataSource::Dir,
                    _ => return Err(value_err(key, value, "expected synthetic or dir")),
                }
            }
            "data.domain" => {
                self.data.domain = value
                    .parse()
                    .map_err(|e: String| value_err(key, value, e))?
            }
            "data.sigma" => self.data.sigma = parse_float(key, value, 0.0, 1.0)?,
            "data.train_n" => self.data.train_n = parse_count(key, value, 1)?,
            "data.val_n" => self.data.val_n = parse_count(key, value, 1)?,
            "data.path" => self.data.path = value.to_string(),
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.peft.rank > self.model.dim {
            return Err(value_err(
                "peft.rank",
                &self.peft.rank.to_string(),
                format!("must be <= model.dim ({})", self.model.dim),
            ));
        }
        if self.data.source == DataSource::Dir && self.data.path.is_empty() {
            return Err(value_err("data.path", "", "required when data.source = dir"));
        }
        Ok(())
    }

    /// Stable textual form: top-level keys, then sections in fixed order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        let m = &self.model;
        let _ = write!(
            s,
            "\n[model]\ndim = {}\nlayers = {}\nheads = {}\npatch = {}\nimage = {}\nclasses = {}\nprompt_tokens = {}\n",
            m.dim, m.layers, m.heads, m.patch, m.image, m.classes, m.prompt_tokens
        );
        let p = &self.peft;
        let _ = write!(
            s,
            "\n[peft]\nmode = {}\nrank = {}\nalpha_base = {}\nprefix_len = {}\nd_mid = {}\nlora_targets = {}\n",
            p.mode, p.rank, p.alpha_base, p.prefix_len, p.d_mid, p.lora_targets
        );
        let g = &self.gate;
        let _ = write!(
            s,
            "\n[gate]\nthreshold = {}\nper_layer = {}\nhidden = {}\n",
            g.threshold, g.per_layer, g.hidden
        );
        let t = &self.train;
        let _ = write!(
            s,
            "\n[train]\nlr = {}\nweight_decay = {}\nbatch = {}\nsteps = {}\neval_every = {}\n",
            t.lr, t.weight_decay, t.batch, t.steps, t.eval_every
        );
        let d = &self.data;
        let source = match d.source {
            DataSource::Synthetic => "synthetic",
            DataSource::Dir => "dir",
        };
        let _ = write!(
            s,
            "\n[data]\nsource = {}\ndomain = {}\nsigma = {}\ntrain_n = {}\nval_n = {}\n",
            source, d.domain, d.sigma, d.train_n, d.val_n
        );
        if !d.path.is_empty() {
            let _ = writeln!(s, "path = {}", d.path);
        }
        s
    }
}
