//! Experiment entry points behind the `mopeft` binary. Each subcommand is a
//! plain function here so tests can drive runs without spawning processes.

mod gradcheck;
mod report;
mod run;
mod sweep;

use std::path::Path;

use anyhow::{Context, Result};
use mopeft::config::ExperimentConfig;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckOutcome, MAX_GRADCHECK_PARAMS};
pub use report::{report, Report};
pub use run::{
    eval, load_data, train, train_model, RunSummary, CHECKPOINT, CONFIG, GATES, GATE_EVENTS,
    METRICS,
};
pub use sweep::{read_summary, sweep, SweepAxis, SweepPoint, SUMMARY, SUMMARY_HEADER};

/// Config file (or defaults), then `--set` overrides, then `--out`.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    out: Option<&Path>,
) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p, overrides)
            .with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::parse("", overrides)?,
    };
    if let Some(out) = out {
        cfg.set("out_dir", &out.to_string_lossy())?;
    }
    Ok(cfg)
}
