use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{GradHook, Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-3;
/// Floor on the relative-error denominator so exact-zero gradients compare
/// by absolute difference.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct FiniteDiff {
    pub step: f64,
    pub tol: f64,
    /// Installed on the analytic pass only; used for fault injection.
    pub grad_hook: Option<GradHook>,
    /// Per-parameter coordinate budget. `None` checks every coordinate;
    /// otherwise the largest-magnitude analytic coordinate plus a seeded
    /// sample, `max_coords` in total.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            grad_hook: None,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradSummary {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tol: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub params: Vec<ParamGradSummary>,
    pub failures: Vec<GradFailure>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst(&self) -> Option<&GradFailure> {
        self.failures
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck: {} coordinates, max rel. error {:.3e} (tol {:.0e}) -> {}",
            self.checked,
            self.max_rel_error,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for p in &self.params {
            writeln!(
                f,
                "  {:<40} {:>7}/{:<7} max rel {:.3e}",
                p.name, p.checked, p.numel, p.max_rel_error
            )?;
        }
        for fail in self.failures.iter().take(20) {
            writeln!(
                f,
                "  FAIL {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                fail.param, fail.index, fail.analytic, fail.numeric, fail.rel_error
            )?;
        }
        if self.failures.len() > 20 {
            writeln!(f, "  ... {} more failures", self.failures.len() - 20)?;
        }
        Ok(())
    }
}

fn select_coords(analytic: &[f64], budget: Option<usize>, seed: u64) -> Vec<usize> {
    let n = analytic.len();
    let k = match budget {
        Some(k) if k < n => k.max(1),
        _ => return (0..n).collect(),
    };
    let peak = (0..n)
        .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
        .expect("non-empty parameter");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = sample(&mut rng, n, k)
        .into_iter()
        .filter(|&i| i != peak)
        .take(k - 1)
        .collect();
    out.push(peak);
    out.sort_unstable();
    out
}

fn term_difference(plus: &[f64], minus: &[f64]) -> f64 {
    assert_eq!(plus.len(), minus.len(), "loss graph structure depends on parameter values");
    plus.iter().zip(minus).map(|(p, m)| p - m).sum()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `loss` against central differences
/// `(f(p+h) - f(p-h)) / 2h`, differenced term by term over
/// [`Graph::loss_terms`], for every coordinate of every trainable parameter
/// in `store` (or a subset of them, see [`FiniteDiff::max_coords`]).
///
/// `loss` must build a fresh forward on the provided graph and return the
/// scalar loss node; it is called once for the analytic pass and twice per
/// coordinate. Parameter values are restored exactly afterwards, and any
/// previously accumulated gradients are replaced.
pub fn finite_diff_check<F>(store: &mut ParamStore, opts: FiniteDiff, mut loss: F) -> Result<GradReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    assert!(opts.step > 0.0, "finite-difference step must be positive");

    store.zero_grad();
    let mut graph = match opts.grad_hook {
        Some(hook) => Graph::with_grad_hook(hook),
        None => Graph::new(),
    };
    let out = loss(store, &mut graph)?;
    graph.backward_into(out, store)?;
    drop(graph);

    let mut eval = |store: &ParamStore| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = loss(store, &mut g)?;
        Ok(g.loss_terms(v))
    };

    let mut report = GradReport {
        tol: opts.tol,
        checked: 0,
        max_rel_error: 0.0,
        params: Vec::new(),
        failures: Vec::new(),
    };

    for id in store.trainable_ids() {
        let analytic = store
            .get(id)
            .tensor
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).tensor.numel()]);
        let name = store.get(id).name.clone();
        let coords = select_coords(&analytic, opts.max_coords, opts.seed ^ id.index() as u64);
        let mut param_max = 0.0f64;
        for &i in &coords {
            let a = analytic[i];
            let original = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = original + opts.step;
            let plus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = original - opts.step;
            let minus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = original;

            let numeric = term_difference(&plus, &minus) / (2.0 * opts.step);
            let rel = relative_error(a, numeric);
            param_max = param_max.max(rel);
            report.checked += 1;
            if !(rel < opts.tol) {
                report.failures.push(GradFailure {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.max_rel_error = report.max_rel_error.max(param_max);
        report.params.push(ParamGradSummary {
            name,
            numel: analytic.len(),
            checked: coords.len(),
            max_rel_error: param_max,
        });
    }
    Ok(report)
}
