use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, ensure, Result};
use mopeft::config::ExperimentConfig;
use mopeft::data::fmt_sig6;
use mopeft::io::{atomic_write, DirLock};

use crate::run::{train, RunSummary};

pub const SUMMARY: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "value,final_miou,trainable_params";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Rank,
    PrefixLen,
    DMid,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Rank => "peft.rank",
            SweepAxis::PrefixLen => "peft.prefix_len",
            SweepAxis::DMid => "peft.d_mid",
        }
    }

    fn dir_name(self, value: usize) -> String {
        let short = self.key().trim_start_matches("peft.");
        format!("{short}_{value}")
    }

    fn applies(self, cfg: &ExperimentConfig) -> bool {
        let m = cfg.peft.mode;
        match self {
            SweepAxis::Rank => m.has_lora(),
            SweepAxis::PrefixLen => m.has_prefix(),
            SweepAxis::DMid => m.has_adapter(),
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "peft.rank" | "rank" => Ok(SweepAxis::Rank),
            "peft.prefix_len" | "prefix_len" => Ok(SweepAxis::PrefixLen),
            "peft.d_mid" | "d_mid" => Ok(SweepAxis::DMid),
            _ => Err(format!(
                "unknown sweep axis `{s}` (expected peft.rank, peft.prefix_len or peft.d_mid)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: usize,
    pub run: RunSummary,
}

fn render_summary(points: &[SweepPoint]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{SUMMARY_HEADER}");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{}",
            p.value,
            fmt_sig6(p.run.final_val_miou()),
            p.run.params.trainable
        );
    }
    s
}

/// One training run per value under `cfg.out_dir/<axis>_<value>`, then
/// `summary.csv` in `cfg.out_dir`. Up to `parallel` runs execute at once;
/// results are listed in the order of `values` either way.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
    parallel: usize,
    force: bool,
) -> Result<Vec<SweepPoint>> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    if !axis.applies(cfg) {
        bail!("{} has no effect in mode {}", axis.key(), cfg.peft.mode);
    }
    let root = PathBuf::from(&cfg.out_dir);
    if root.join(SUMMARY).exists() && !force {
        bail!("{} already holds a sweep; pass --force to overwrite it", root.display());
    }
    // every point config is validated before any run starts
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set(axis.key(), &v.to_string())?;
            c.set("out_dir", &root.join(axis.dir_name(v)).to_string_lossy())?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let _lock = DirLock::acquire(&root)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    let workers = parallel.clamp(1, configs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let out = train(&configs[i], force);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(out);
            });
        }
    });

    let mut points = Vec::with_capacity(values.len());
    for (value, res) in values.iter().zip(results.into_inner().expect("workers joined")) {
        let run = res
            .ok_or_else(|| anyhow!("sweep point {value} did not run"))?
            .map_err(|e| e.context(format!("sweep point {} = {value}", axis.key())))?;
        points.push(SweepPoint { value: *value, run });
    }
    atomic_write(&root.join(SUMMARY), render_summary(&points).as_bytes())?;
    Ok(points)
}

/// Parses `summary.csv` back into `(value, final_miou, trainable_params)`.
pub fn read_summary(path: &Path) -> Result<Vec<(usize, f64, usize)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some(SUMMARY_HEADER), "{}: bad header", path.display());
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ensure!(f.len() == 3, "{}: bad line `{l}`", path.display());
            Ok((f[0].parse()?, f[1].parse()?, f[2].parse()?))
        })
        .collect()
}
