use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::params::{Component, ParamStore};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::new();
    let i2 = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.leaf(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out), &[5.0, 6.0, 7.0, 8.0]);

    let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = g.leaf(&t(&[2, 1], &[1.0, 1.0]));
    let out = g.matmul(a, ones).unwrap();
    assert_eq!(g.shape(out), &[2, 1]);
    assert_eq!(g.value(out), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(&Tensor::zeros(&[2, 3]));
    let b = g.leaf(&Tensor::zeros(&[4, 5]));
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[2], &[0.0, 0.0]));
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.leaf(&t(&[2], &[2f64.ln(), 0.0]));
    let y = g.softmax_lastdim(x).unwrap();
    assert!(close(g.value(y), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));

    for c in [-50.0, 0.0, 3.7, 200.0] {
        let x = g.leaf(&t(&[2], &[c, c + 3f64.ln()]));
        let y = g.softmax_lastdim(x).unwrap();
        assert!(close(g.value(y), &[0.25, 0.75], 1e-12), "c = {c}");
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(g.softmax_lastdim(x), Err(Error::NonFinite(_))));
}

#[test]
fn elementwise_definitions() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[3], &[0.0, -3.0, 0.0]));
    let s = g.sigmoid(x);
    let r = g.relu(x);
    let ge = g.gelu(x);
    assert_eq!(g.value(s)[0], 0.5);
    assert_eq!(g.value(r)[1], 0.0);
    assert_eq!(g.value(ge)[0], 0.0);
}

#[test]
fn elementwise_broadcasting_rules() {
    let mut g = Graph::new();
    let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let s = g.scalar(10.0);
    let sum = g.add(a, s).unwrap();
    assert_eq!(g.value(sum), &[11.0, 12.0, 13.0, 14.0]);
    let prod = g.mul(s, a).unwrap();
    assert_eq!(g.value(prod), &[10.0, 20.0, 30.0, 40.0]);
    let b = g.leaf(&Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
}

fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, tensor) in values {
        store.add(*name, Component::Encoder, tensor.clone().with_requires_grad(true));
    }
    store
}

#[test]
fn backward_square_and_sigmoid() {
    let mut store = store_with(&[("x", Tensor::scalar(3.0))]);
    let id = store.find("x").unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, id);
    let y = g.mul(x, x).unwrap();
    g.backward_into(y, &mut store).unwrap();
    assert_eq!(store.get(id).tensor.grad().unwrap(), &[6.0]);

    let mut store = store_with(&[("x", Tensor::scalar(0.0))]);
    let mut g = Graph::new();
    let x = g.param(&store, id);
    let y = g.sigmoid(x);
    g.backward_into(y, &mut store).unwrap();
    assert_eq!(store.get(id).tensor.grad().unwrap(), &[0.25]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut store = store_with(&[("x", Tensor::scalar(3.0))]);
    let id = store.find("x").unwrap();
    for expected in [6.0, 12.0] {
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = g.mul(x, x).unwrap();
        g.backward_into(y, &mut store).unwrap();
        assert_eq!(store.get(id).tensor.grad().unwrap(), &[expected]);
    }
    store.zero_grad();
    assert_eq!(store.get(id).tensor.grad().unwrap(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(&[2]).with_requires_grad(true));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unreachable_leaf_gets_exact_zero_grad() {
    let mut store = store_with(&[("used", Tensor::scalar(2.0)), ("unused", Tensor::scalar(5.0))]);
    let (used, unused) = (store.find("used").unwrap(), store.find("unused").unwrap());
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let _ = g.param(&store, unused);
    let y = g.mul(u, u).unwrap();
    g.backward_into(y, &mut store).unwrap();
    assert_eq!(store.get(unused).tensor.grad().unwrap(), &[0.0]);
}

/// Central differences computed directly on the raw arithmetic, kept
/// independent of the graph: loss = sum(A * B).
#[test]
fn matmul_sum_grads_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let raw = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    s += a[i * 3 + k] * b[k * 3 + j];
                }
            }
        }
        s
    };
    let mut store = store_with(&[("a", a.clone()), ("b", b.clone())]);
    let (ia, ib) = (store.find("a").unwrap(), store.find("b").unwrap());
    let mut g = Graph::new();
    let va = g.param(&store, ia);
    let vb = g.param(&store, ib);
    let p = g.matmul(va, vb).unwrap();
    let loss = g.sum(p);
    g.backward_into(loss, &mut store).unwrap();

    let h = 1e-5;
    for (id, which) in [(ia, 0), (ib, 1)] {
        let grad = store.get(id).tensor.grad().unwrap().to_vec();
        for i in 0..9 {
            let (mut ap, mut bp) = (a.data().to_vec(), b.data().to_vec());
            let (mut am, mut bm) = (a.data().to_vec(), b.data().to_vec());
            if which == 0 {
                ap[i] += h;
                am[i] -= h;
            } else {
                bp[i] += h;
                bm[i] -= h;
            }
            let numeric = (raw(&ap, &bp) - raw(&am, &bm)) / (2.0 * h);
            assert!(relative_error(grad[i], numeric) < 1e-6);
        }
    }
}

#[test]
fn finite_diff_check_square_and_constant() {
    let mut store = store_with(&[("p", Tensor::scalar(1.0))]);
    let id = store.find("p").unwrap();
    let report = finite_diff_check(&mut store, FiniteDiff::default(), |s, g| {
        let p = g.param(s, id);
        g.mul(p, p)
    })
    .unwrap();
    assert!(report.passed());
    assert!(report.max_rel_error < 1e-6);
    assert!((store.get(id).tensor.grad().unwrap()[0] - 2.0).abs() < 1e-12);

    let report = finite_diff_check(&mut store, FiniteDiff::default(), |s, g| {
        let p = g.param(s, id);
        let z = g.scale(p, 0.0);
        let c = g.scalar(4.0);
        g.add(z, c)
    })
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.max_rel_error, 0.0);
    assert_eq!(store.get(id).tensor.grad().unwrap(), &[0.0]);
    assert_eq!(store.get(id).tensor.data(), &[1.0]);
}

#[test]
fn finite_diff_check_reports_corrupted_rule() {
    fn corrupt_sigmoid(op: &'static str, grad: &mut [f64]) {
        if op == "sigmoid" {
            grad.iter_mut().for_each(|g| *g *= 1.5);
        }
    }
    let mut store = store_with(&[("w", t(&[3], &[0.3, -0.2, 0.9]))]);
    let id = store.find("w").unwrap();
    let opts = FiniteDiff {
        grad_hook: Some(corrupt_sigmoid),
        ..FiniteDiff::default()
    };
    let report = finite_diff_check(&mut store, opts, |s, g| {
        let w = g.param(s, id);
        let y = g.sigmoid(w);
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures.len(), 3);
    assert_eq!(report.worst().unwrap().param, "w");
}

/// Every differentiable op composed into one scalar and checked against
/// central differences.
#[test]
fn every_op_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = store_with(&[
        ("x", Tensor::randn(&[4, 6], 1.0, &mut rng)),
        ("w", Tensor::randn(&[5, 6], 0.5, &mut rng)),
        ("m", Tensor::randn(&[6, 3], 0.5, &mut rng)),
        ("bias", Tensor::randn(&[5], 0.5, &mut rng)),
        ("gain", Tensor::randn(&[5], 0.5, &mut rng)),
        ("beta", Tensor::randn(&[5], 0.5, &mut rng)),
        ("s", Tensor::scalar(0.7)),
        ("gate", Tensor::scalar(0.35)),
        ("k", Tensor::randn(&[3, 5], 0.5, &mut rng)),
    ]);
    let ids: Vec<_> = ["x", "w", "m", "bias", "gain", "beta", "s", "gate", "k"]
        .iter()
        .map(|n| store.find(n).unwrap())
        .collect();
    let targets = [0, 2, 1, 4, 3, 0, 1, 2];
    let report = finite_diff_check(&mut store, FiniteDiff::default(), |st, g| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
        let (x, w, m, bias, gain, beta, s, gate, k) =
            (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        let h = g.matmul_t(x, w)?; // 4x5
        let h = g.add_row(h, bias)?;
        let h = g.layer_norm(h, gain, beta, 1e-5)?;
        let a = g.gelu(h);
        let b = g.sigmoid(h);
        let ab = g.mul(a, b)?;
        let ab = g.mul(ab, s)?;
        let r = g.relu(h);
        let sum = g.add(ab, r)?;
        let q = g.matmul(x, m)?; // 4x3
        let scores = g.matmul(q, k)?; // 4x5
        let mixed = g.concat_cols(&[scores, sum])?; // 4x10
        let wts = g.gated_softmax(mixed, 6, gate)?;
        let sm = g.softmax_lastdim(sum)?;
        let left = g.slice_cols(wts, 0, 5)?;
        let right = g.slice_cols(wts, 5, 5)?;
        let lr = g.add(left, right)?;
        let stacked = g.concat_rows(&[lr, sm])?; // 8x5
        let pooled = g.mean_rows(stacked);
        let gathered = g.gather_rows(stacked, &[0, 3, 3, 7, 1, 2, 5, 6])?;
        let gathered = g.add_row(gathered, pooled)?;
        let gathered = g.scale(gathered, 3.0);
        let reshaped = g.reshape(gathered, &[2, 4, 5])?;
        g.cross_entropy(reshaped, &targets)
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn gated_softmax_gate_zero_is_plain_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores = Tensor::randn(&[3, 7], 2.0, &mut rng);
    let mut g = Graph::new();
    let s = g.leaf(&scores);
    let zero = g.scalar(0.0);
    let w = g.gated_softmax(s, 4, zero).unwrap();
    let real = g.slice_cols(s, 0, 4).unwrap();
    let plain = g.softmax_lastdim(real).unwrap();
    for r in 0..3 {
        let row = &g.value(w)[r * 7..(r + 1) * 7];
        assert!(close(&row[..4], &g.value(plain)[r * 4..(r + 1) * 4], 1e-15));
        assert!(row[4..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn gated_softmax_gate_one_is_concat_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scores = Tensor::randn(&[3, 7], 2.0, &mut rng);
    let mut g = Graph::new();
    let s = g.leaf(&scores);
    let one = g.scalar(1.0);
    let w = g.gated_softmax(s, 4, one).unwrap();
    let plain = g.softmax_lastdim(s).unwrap();
    assert!(close(g.value(w), g.value(plain), 1e-15));
}

proptest! {
    #[test]
    fn softmax_rows_normalised_and_shift_invariant(
        rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 1..9), 1..5),
        shift in -100.0f64..100.0,
    ) {
        let cols = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
        let flat: Vec<f64> = rows.concat();
        let shifted: Vec<f64> = flat.iter().map(|v| v + shift).collect();
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(&[rows.len(), cols], flat).unwrap());
        let xs = g.leaf(&Tensor::new(&[rows.len(), cols], shifted).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        let ys = g.softmax_lastdim(xs).unwrap();
        for (r, rs) in g.value(y).chunks(cols).zip(g.value(ys).chunks(cols)) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (a, b) in r.iter().zip(rs) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gated_softmax_weights_sum_to_one(
        seed in 0u64..1000,
        gate in 0.0f64..=1.0,
        n_real in 1usize..6,
        n_prefix in 0usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = n_real + n_prefix;
        let mut g = Graph::new();
        let s = g.leaf(&Tensor::randn(&[4, cols], 3.0, &mut rng));
        let gv = g.scalar(gate);
        let w = g.gated_softmax(s, n_real, gv).unwrap();
        for row in g.value(w).chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn coordinate_budget_keeps_the_peak() {
    let vals: Vec<f64> = (0..40).map(|i| 0.01 * i as f64).collect();
    let mut store = store_with(&[("w", t(&[40], &vals)), ("s", Tensor::scalar(0.5))]);
    let (w, sc) = (store.find("w").unwrap(), store.find("s").unwrap());
    let opts = FiniteDiff {
        max_coords: Some(5),
        ..FiniteDiff::default()
    };
    // d/dw_i of sum(w^2) is 2 w_i, largest at i = 39
    let report = finite_diff_check(&mut store, opts, |s, g| {
        let p = g.param(s, w);
        let sq = g.mul(p, p)?;
        let q = g.param(s, sc);
        let y = g.sum(sq);
        g.mul(y, q)
    })
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.checked, 5 + 1);
    assert_eq!(report.params[0].checked, 5);
    assert_eq!(report.params[1].checked, 1);

    fn corrupt_mul(op: &'static str, grad: &mut [f64]) {
        if op == "mul" {
            grad.iter_mut().for_each(|g| *g *= 1.01);
        }
    }
    let opts = FiniteDiff {
        max_coords: Some(3),
        grad_hook: Some(corrupt_mul),
        ..FiniteDiff::default()
    };
    let report = finite_diff_check(&mut store, opts, |s, g| {
        let p = g.param(s, w);
        let sq = g.mul(p, p)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.failures.iter().any(|f| f.param == "w" && f.index == 39));
}

#[test]
fn loss_terms_decompose_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let a = g.leaf(&Tensor::randn(&[6, 3], 1.0, &mut rng));
    let b = g.leaf(&Tensor::randn(&[4, 3], 1.0, &mut rng));
    let la = g.cross_entropy(a, &[0, 1, 2, 0, 1, 2]).unwrap();
    let lb = g.cross_entropy(b, &[2, 2, 1, 0]).unwrap();
    let both = g.concat_cols(&[la, lb]).unwrap();
    let total = g.sum(both);
    let loss = g.scale(total, 0.5);
    let terms = g.loss_terms(loss);
    assert_eq!(terms.len(), 10);
    let sum: f64 = terms.iter().sum();
    assert!((sum - g.scalar_value(loss)).abs() < 1e-14);
    // opaque nodes contribute their own elements
    let s = g.sigmoid(loss);
    assert_eq!(g.loss_terms(s), g.value(s));
}
