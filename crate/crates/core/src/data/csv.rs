//! CSV reports. UTF-8, LF line endings, no quoting (no field contains a
//! comma).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gating::{GateMethod, GateTelemetry, SelectionCounts};
use crate::io::atomic_write;
use crate::train::{MetricsRow, Split};

pub const GATE_HEADER: &str = "layer,method,count,total_samples";
pub const METRICS_HEADER: &str =
    "epoch,split,loss,miou,gate_lora_mean,gate_prefix_mean,gate_adapter_mean";
pub const GATE_EVENTS_HEADER: &str = "sample,layer,method,value";

/// Six significant digits in the style of C's `%g`: fixed notation for
/// decimal exponents in `[-4, 6)`, otherwise `d.ddddde±XX`, trailing zeros
/// removed.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig6).unwrap_or_default()
}

pub fn render_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.epoch, r.split));
    let mut s = String::new();
    let _ = writeln!(s, "{METRICS_HEADER}");
    for r in sorted {
        let g = |m: GateMethod| opt(r.gate_means.map(|v| v[m.index()]));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.split,
            fmt_sig6(r.loss),
            fmt_sig6(r.miou),
            g(GateMethod::Lora),
            g(GateMethod::Prefix),
            g(GateMethod::Adapter)
        );
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    atomic_write(path, render_metrics_csv(rows).as_bytes())
}

fn check_header(path: &Path, text: &str, header: &str) -> Result<()> {
    match text.lines().next() {
        Some(h) if h == header => Ok(()),
        other => Err(Error::dataset(
            path,
            format!("expected header `{header}`, found `{}`", other.unwrap_or("")),
        )),
    }
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::dataset(path, format!("line {line}: bad number `{field}`")))
}

/// Parses a metrics CSV; per-class IoUs are not part of the file and come
/// back empty.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    check_header(path, &text, METRICS_HEADER)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::dataset(path, format!("line {}: expected 7 fields", i + 1)));
        }
        let split = match f[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(Error::dataset(path, format!("line {}: bad split `{other}`", i + 1))),
        };
        let gates = if f[4..].iter().all(|s| s.is_empty()) {
            None
        } else {
            Some([
                num(path, i + 1, f[4])?,
                num(path, i + 1, f[5])?,
                num(path, i + 1, f[6])?,
            ])
        };
        rows.push(MetricsRow {
            epoch: num(path, i + 1, f[0])?,
            split,
            loss: num(path, i + 1, f[2])?,
            miou: num(path, i + 1, f[3])?,
            per_class: Vec::new(),
            gate_means: gates,
        });
    }
    Ok(rows)
}

/// One line of `gates.csv`; `layer = None` is the `ALL` row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateCsvRow {
    pub layer: Option<usize>,
    pub method: GateMethod,
    pub count: usize,
    pub total_samples: usize,
}

pub fn render_gate_csv(counts: &SelectionCounts) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{GATE_HEADER}");
    let n = counts.total_samples;
    for l in counts.layers() {
        for m in GateMethod::ALL {
            let _ = writeln!(s, "{l},{m},{},{n}", counts.count(l, m));
        }
    }
    for m in GateMethod::ALL {
        let _ = writeln!(s, "ALL,{m},{},{n}", counts.overall(m));
    }
    s
}

pub fn write_gate_csv(counts: &SelectionCounts, path: &Path) -> Result<()> {
    atomic_write(path, render_gate_csv(counts).as_bytes())
}

pub fn read_gate_csv(path: &Path) -> Result<Vec<GateCsvRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    check_header(path, &text, GATE_HEADER)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::dataset(path, format!("line {}: expected 4 fields", i + 1)));
        }
        let layer = if f[0] == "ALL" {
            None
        } else {
            Some(num(path, i + 1, f[0])?)
        };
        let method = f[1]
            .parse()
            .map_err(|e: String| Error::dataset(path, format!("line {}: {e}", i + 1)))?;
        rows.push(GateCsvRow {
            layer,
            method,
            count: num(path, i + 1, f[2])?,
            total_samples: num(path, i + 1, f[3])?,
        });
    }
    Ok(rows)
}

/// Raw telemetry, one record per line in sample-major order.
pub fn render_gate_events_csv(t: &GateTelemetry) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{GATE_EVENTS_HEADER}");
    for r in t.records() {
        // full precision so the records can be re-aggregated exactly
        let _ = writeln!(s, "{},{},{},{:?}", r.sample, r.layer, r.method, r.value);
    }
    s
}

pub fn write_gate_events_csv(t: &GateTelemetry, path: &Path) -> Result<()> {
    atomic_write(path, render_gate_events_csv(t).as_bytes())
}
