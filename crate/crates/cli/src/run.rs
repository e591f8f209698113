use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mopeft::config::{DataSource, ExperimentConfig};
use mopeft::data::{
    gen_synthetic, load_dataset, write_gate_csv, write_gate_events_csv, write_metrics_csv, Dataset,
    Prepared, SyntheticTaskSpec,
};
use mopeft::gating::{selection_counts, SelectionCounts};
use mopeft::io::{atomic_write, DirLock, LOCK_NAME};
use mopeft::model::{load_checkpoint, save_checkpoint, GateOverride, SegModel};
use mopeft::peft::ParamReport;
use mopeft::train::{evaluate, infer_telemetry, EvalResult, MetricsRow, Split};

pub const CONFIG: &str = "config.canonical";
pub const CHECKPOINT: &str = "model.mpft";
pub const METRICS: &str = "metrics.csv";
pub const GATES: &str = "gates.csv";
/// Raw per-sample gate values behind `gates.csv`.
pub const GATE_EVENTS: &str = "gate_events.csv";

const ARTIFACTS: [&str; 5] = [CONFIG, CHECKPOINT, METRICS, GATES, GATE_EVENTS];

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub params: ParamReport,
    /// Gate selection counts over the validation split (gated modes).
    pub counts: Option<SelectionCounts>,
}

impl RunSummary {
    /// mIoU of the last validation row.
    pub fn final_val_miou(&self) -> f64 {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == Split::Val)
            .map(|r| r.miou)
            .expect("every run evaluates the validation split")
    }

    /// mIoU of the last training row, if the mode trained at all.
    pub fn final_train_miou(&self) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == Split::Train)
            .map(|r| r.miou)
    }
}

/// The configured dataset, checked against the model's image extent.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match cfg.data.source {
        DataSource::Synthetic => gen_synthetic(&SyntheticTaskSpec {
            domain: cfg.data.domain,
            image: cfg.model.image,
            classes: cfg.model.classes,
            sigma: cfg.data.sigma,
            train_n: cfg.data.train_n,
            val_n: cfg.data.val_n,
            seed: cfg.seed,
        })?,
        DataSource::Dir => load_dataset(Path::new(&cfg.data.path), cfg.model.classes)?,
    };
    for s in ds.train.iter().chain(&ds.val) {
        ensure!(
            s.side == cfg.model.image,
            "dataset images are {0}x{0} but model.image = {1}",
            s.side,
            cfg.model.image
        );
    }
    ensure!(!ds.val.is_empty(), "dataset has no validation samples");
    Ok(ds)
}

/// Refuses directories that hold a previous run unless `force`, and always
/// refuses a directory another run has locked.
fn claim(dir: &Path, force: bool) -> Result<DirLock> {
    let lock = dir.join(LOCK_NAME);
    if lock.exists() {
        bail!(
            "{} is locked by another run (remove {} if no run is active)",
            dir.display(),
            lock.display()
        );
    }
    if dir.join(CONFIG).exists() {
        if !force {
            bail!(
                "{} already holds a run; pass --force to overwrite it",
                dir.display()
            );
        }
        for name in ARTIFACTS {
            let p = dir.join(name);
            if p.exists() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    Ok(DirLock::acquire(dir)?)
}

pub fn train(cfg: &ExperimentConfig, force: bool) -> Result<RunSummary> {
    train_model(cfg, SegModel::from_config(cfg)?, force)
}

/// Runs training for an already-built model (which must match `cfg`) and
/// writes every artifact under `cfg.out_dir`.
pub fn train_model(cfg: &ExperimentConfig, mut model: SegModel, force: bool) -> Result<RunSummary> {
    ensure!(
        model.mode == cfg.peft.mode,
        "model mode {} does not match config mode {}",
        model.mode,
        cfg.peft.mode
    );
    let dir = PathBuf::from(&cfg.out_dir);
    let _lock = claim(&dir, force)?;
    atomic_write(&dir.join(CONFIG), cfg.canonical().as_bytes())?;

    let ds = load_data(cfg)?;
    let train_set = Prepared::from_samples(&ds.train);
    let val_set = Prepared::from_samples(&ds.val);
    let rows = mopeft::train::train(&mut model, &train_set, &val_set, &cfg.train, cfg.seed)
        .with_context(|| format!("training {} in {}", model.mode, dir.display()))?;

    save_checkpoint(&model, &dir.join(CHECKPOINT))?;
    write_metrics_csv(&rows, &dir.join(METRICS))?;
    let counts = if model.mode.has_gates() {
        let telemetry = infer_telemetry(&model, &val_set)?;
        let counts = selection_counts(&telemetry, cfg.gate.threshold)?;
        write_gate_csv(&counts, &dir.join(GATES))?;
        write_gate_events_csv(&telemetry, &dir.join(GATE_EVENTS))?;
        Some(counts)
    } else {
        None
    };
    Ok(RunSummary {
        out_dir: dir,
        rows,
        params: model.param_report(),
        counts,
    })
}

/// Re-evaluates the checkpoint in `dir` on the validation split of its
/// config. `overrides` may retarget the data but not the model.
pub fn eval(dir: &Path, overrides: &[String]) -> Result<EvalResult> {
    let cfg_path = dir.join(CONFIG);
    let cfg = ExperimentConfig::from_file(&cfg_path, overrides)
        .with_context(|| format!("loading {}", cfg_path.display()))?;
    let model = load_checkpoint(&dir.join(CHECKPOINT), Some(cfg.peft.mode))?;
    ensure!(
        model.model == cfg.model && model.peft == cfg.peft && model.gate == cfg.gate,
        "overrides must not change the model, peft or gate sections of a trained run"
    );
    let ds = load_data(&cfg)?;
    Ok(evaluate(&model, &Prepared::from_samples(&ds.val), GateOverride::NONE)?)
}
