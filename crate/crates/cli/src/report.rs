use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mopeft::config::ExperimentConfig;
use mopeft::data::{read_gate_csv, GateCsvRow};
use mopeft::gating::GateMethod;
use mopeft::model::{load_checkpoint, FineTuneMode};
use mopeft::peft::ParamReport;

use crate::run::{CHECKPOINT, CONFIG, GATES};

#[derive(Debug, Clone)]
pub struct Report {
    pub dir: PathBuf,
    pub mode: FineTuneMode,
    pub threshold: Option<f64>,
    pub total_samples: usize,
    /// `ALL` rows of `gates.csv`, indexed by [`GateMethod::index`].
    pub overall: [usize; 3],
    pub per_layer: BTreeMap<usize, [usize; 3]>,
    pub params: ParamReport,
}

/// Gate frequencies from `gates.csv` and the parameter budget of the
/// checkpoint in `dir`.
pub fn report(dir: &Path) -> Result<Report> {
    let gates = dir.join(GATES);
    if !gates.exists() {
        bail!(
            "{} not found: reports need a finished run of a gated mode (peft.mode = mopeft)",
            gates.display()
        );
    }
    let rows = read_gate_csv(&gates)?;
    let model = load_checkpoint(&dir.join(CHECKPOINT), None)
        .with_context(|| format!("reading the checkpoint in {}", dir.display()))?;
    let threshold = ExperimentConfig::from_file(&dir.join(CONFIG), &[])
        .ok()
        .map(|c| c.gate.threshold);

    let mut overall = [0; 3];
    let mut per_layer: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    let mut total_samples = 0;
    for GateCsvRow { layer, method, count, total_samples: n } in rows {
        total_samples = n;
        match layer {
            Some(l) => per_layer.entry(l).or_default()[method.index()] = count,
            None => overall[method.index()] = count,
        }
    }
    Ok(Report {
        dir: dir.to_path_buf(),
        mode: model.mode,
        threshold,
        total_samples,
        overall,
        per_layer,
        params: model.param_report(),
    })
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tau = self
            .threshold
            .map(|t| format!("threshold {t}"))
            .unwrap_or_else(|| "threshold unknown".into());
        writeln!(
            f,
            "gate selection in {} ({tau}, {} samples, {} layers)",
            self.dir.display(),
            self.total_samples,
            self.per_layer.len()
        )?;
        let events = self.total_samples * self.per_layer.len();
        writeln!(f, "{:<10} {:>8} {:>8} {:>8}", "method", "calls", "events", "rate")?;
        for m in GateMethod::ALL {
            let c = self.overall[m.index()];
            let rate = if events == 0 { 0.0 } else { c as f64 / events as f64 };
            writeln!(f, "{:<10} {:>8} {:>8} {:>7.1}%", m.name(), c, events, 100.0 * rate)?;
        }
        writeln!(f)?;
        writeln!(f, "{:<6} {:>8} {:>8} {:>8}", "layer", "lora", "prefix", "adapter")?;
        for (l, c) in &self.per_layer {
            writeln!(f, "{:<6} {:>8} {:>8} {:>8}", l, c[0], c[1], c[2])?;
        }
        writeln!(f)?;
        writeln!(f, "parameter budget ({})", self.mode.label())?;
        write!(f, "{}", self.params)
    }
}
