use anyhow::{ensure, Result};
use mopeft::autodiff::{FiniteDiff, GradHook, GradReport};
use mopeft::config::ExperimentConfig;
use mopeft::data::Prepared;
use mopeft::model::{GateOverride, SegModel};

use crate::run::load_data;

/// Finite differences cost two forward passes per coordinate.
pub const MAX_GRADCHECK_PARAMS: usize = 200_000;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Std of the noise added to trainable parameters before checking;
    /// zero checks the freshly initialised model.
    pub perturb: f64,
    /// Coordinates checked per parameter tensor; `None` checks all.
    pub max_coords: Option<usize>,
    pub grad_hook: Option<GradHook>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            perturb: 0.3,
            max_coords: Some(32),
            grad_hook: None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum GradcheckOutcome {
    /// The mode trains nothing, so there is nothing to check.
    Vacuous { mode: String },
    Checked(GradReport),
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        match self {
            GradcheckOutcome::Vacuous { .. } => true,
            GradcheckOutcome::Checked(r) => r.passed(),
        }
    }
}

impl std::fmt::Display for GradcheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradcheckOutcome::Vacuous { mode } => write!(
                f,
                "gradcheck: mode {mode} has no trainable parameters; nothing to check (vacuous PASS)"
            ),
            GradcheckOutcome::Checked(r) => write!(f, "{r}"),
        }
    }
}

/// Checks the batch loss gradient of every trainable parameter on the
/// first `train.batch` training samples.
pub fn gradcheck(cfg: &ExperimentConfig, opts: GradcheckOptions) -> Result<GradcheckOutcome> {
    let mut model = SegModel::from_config(cfg)?;
    let total = model.store.numel();
    ensure!(
        total < MAX_GRADCHECK_PARAMS,
        "model has {total} parameters; gradcheck is limited to fewer than {MAX_GRADCHECK_PARAMS} (try --set model.layers=2)"
    );
    if !model.mode.trains() {
        return Ok(GradcheckOutcome::Vacuous {
            mode: model.mode.to_string(),
        });
    }
    if opts.perturb > 0.0 {
        model.perturb_trainable(opts.perturb, cfg.seed);
    }
    let ds = load_data(cfg)?;
    let n = cfg.train.batch.min(ds.train.len());
    let prepared = Prepared::from_samples(&ds.train[..n]);
    let batch: Vec<_> = prepared.iter().map(|p| (&p.image, &p.mask[..])).collect();
    let fd = FiniteDiff {
        grad_hook: opts.grad_hook,
        max_coords: opts.max_coords,
        seed: cfg.seed,
        ..FiniteDiff::default()
    };
    Ok(GradcheckOutcome::Checked(
        model.gradcheck(fd, &batch, GateOverride::NONE)?,
    ))
}
