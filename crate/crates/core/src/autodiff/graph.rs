use std::collections::HashMap;

use super::kernels::{axpy, matmul_acc, matmul_t_acc, matmul_tn_acc};
use super::tensor::{check_shape, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, n: usize, p: usize },
    MatMulT { a: Var, b: Var, m: usize, n: usize, p: usize },
    Add { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    AddRow { a: Var, row: Var },
    Scale { a: Var, factor: f64 },
    Unary { a: Var, kind: Unary },
    Softmax { a: Var },
    GatedSoftmax { scores: Var, gate: Var, n_real: usize, unweighted: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MeanRows { a: Var },
    Sum { a: Var },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, index: Vec<usize> },
    Reshape { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, row_loss: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulT { .. } => "matmul_t",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::Unary { kind: Unary::Sigmoid, .. } => "sigmoid",
            Op::Unary { kind: Unary::Gelu, .. } => "gelu",
            Op::Unary { kind: Unary::Relu, .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::GatedSoftmax { .. } => "gated_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanRows { .. } => "mean_rows",
            Op::Sum { .. } => "sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape { .. } => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

impl Node {
    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }
}

/// Backward hook used by fault-injection tests to corrupt one op kind's
/// gradient rule. `None` in normal operation.
pub type GradHook = fn(op: &'static str, grad: &mut [f64]);

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// index order is a topological order of the graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_hook: Option<GradHook>,
}

/// Adjoints of every node computed by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_grad_hook(hook: GradHook) -> Self {
        Self {
            grad_hook: Some(hook),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "not a scalar node");
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is valid")
    }

    /// Records `tensor` as a leaf; it takes part in backward iff the tensor
    /// requires gradients.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            requires_grad: tensor.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(&Tensor::scalar(value))
    }

    /// Leaf bound to a stored parameter. Each parameter enters a graph once;
    /// repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(&store.get(id).tensor);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        matmul_acc(self.value(a), self.value(b), &mut out, m, n, p);
        Ok(self.push(vec![m, p], out, &[a, b], Op::MatMul { a, b, m, n, p }))
    }

    /// `a [m x n] * b[p x n]^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, n, p) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * p];
        matmul_t_acc(self.value(a), self.value(b), &mut out, m, n, p);
        Ok(self.push(vec![m, p], out, &[a, b], Op::MatMulT { a, b, m, n, p }))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Broadcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if sa == sb {
            Ok((Broadcast::Same, sa.to_vec()))
        } else if na == 1 {
            Ok((Broadcast::LhsScalar, sb.to_vec()))
        } else if nb == 1 {
            Ok((Broadcast::RhsScalar, sa.to_vec()))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul" } else { "add" };
        let (bc, shape) = self.broadcast(name, a, b)?;
        let f = |x: f64, y: f64| if mul { x * y } else { x + y };
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = match bc {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::LhsScalar => vb.iter().map(|&y| f(va[0], y)).collect(),
            Broadcast::RhsScalar => va.iter().map(|&x| f(x, vb[0])).collect(),
        };
        let op = if mul {
            Op::Mul { a, b, bc }
        } else {
            Op::Add { a, b, bc }
        };
        Ok(self.push(shape, out, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// Adds a `[cols]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.node(a).cols();
        if self.value(row).len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a, row], Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], Op::Scale { a, factor })
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| match kind {
                Unary::Sigmoid => sigmoid(x),
                Unary::Gelu => gelu(x),
                Unary::Relu => x.max(0.0),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], Op::Unary { a, kind })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let node = self.node(a);
        if node.value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("softmax_lastdim"));
        }
        let cols = node.cols();
        let mut out = node.value.clone();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = node.shape.clone();
        Ok(self.push(shape, out, &[a], Op::Softmax { a }))
    }

    /// Row-wise normalisation where the first `n_real` columns carry weight
    /// one and the remaining columns carry the scalar weight `gate`:
    /// `w_ij = a_j exp(l_ij) / sum_k a_k exp(l_ik)`.
    ///
    /// With `gate == 0` the trailing columns receive exactly zero weight and
    /// the leading columns reduce to a plain softmax.
    pub fn gated_softmax(&mut self, scores: Var, n_real: usize, gate: Var) -> Result<Var> {
        let node = self.node(scores);
        let cols = node.cols();
        if n_real == 0 || n_real > cols {
            return Err(Error::InvalidShape {
                shape: node.shape.clone(),
                reason: format!("gated_softmax needs 1 <= n_real <= {cols}, got {n_real}"),
            });
        }
        if self.value(gate).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "gated_softmax",
                lhs: node.shape.clone(),
                rhs: self.shape(gate).to_vec(),
            });
        }
        if node.value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gated_softmax"));
        }
        let g = self.value(gate)[0];
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::NonFinite("gated_softmax gate outside [0, 1]"));
        }
        let mut weights = vec![0.0; node.value.len()];
        let mut unweighted = vec![0.0; node.value.len()];
        for ((row, w), u) in node
            .value
            .chunks(cols)
            .zip(weights.chunks_mut(cols))
            .zip(unweighted.chunks_mut(cols))
        {
            let active = if g > 0.0 { cols } else { n_real };
            let max = row[..active].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut real_sum = 0.0;
            for j in 0..n_real {
                u[j] = (row[j] - max).exp();
                real_sum += u[j];
            }
            let mut prefix_sum = 0.0;
            for j in n_real..cols {
                u[j] = (row[j] - max).exp();
                prefix_sum += u[j];
            }
            let z = real_sum + g * prefix_sum;
            for j in 0..cols {
                u[j] /= z;
                w[j] = if j < n_real { u[j] } else { g * u[j] };
            }
        }
        let shape = node.shape.clone();
        Ok(self.push(
            shape,
            weights,
            &[scores, gate],
            Op::GatedSoftmax {
                scores,
                gate,
                n_real,
                unweighted,
            },
        ))
    }

    /// Normalises each row of `x` to zero mean and unit variance, then
    /// applies `gain` and `bias` (both `[cols]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let node = self.node(x);
        let d = node.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: node.shape.clone(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = node.rows();
        let mut xhat = vec![0.0; node.value.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; node.value.len()];
        for r in 0..rows {
            let row = &node.value[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * gv[c] + bv[c];
            }
        }
        let shape = node.shape.clone();
        Ok(self.push(
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over rows: `[R x C] -> [1 x C]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let node = self.node(a);
        let (rows, cols) = (node.rows(), node.cols());
        let mut out = vec![0.0; cols];
        for row in node.value.chunks(cols) {
            axpy(1.0, row, &mut out);
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        self.push(vec![1, cols], out, &[a], Op::MeanRows { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], &[a], Op::Sum { a })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let node = self.node(a);
        let (rows, cols) = (node.rows(), node.cols());
        if len == 0 || start + len > cols {
            return Err(Error::InvalidShape {
                shape: node.shape.clone(),
                reason: format!("column slice {start}..{} out of range", start + len),
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in node.value.chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(vec![rows, len], out, &[a], Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.node(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.node(p).rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += self.node(p).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.node(p).cols();
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            vec![rows, total],
            out,
            parts,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.node(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.node(p).cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / cols;
        Ok(self.push(
            vec![rows, cols],
            out,
            parts,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let node = self.node(a);
        let (rows, cols) = (node.rows(), node.cols());
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(&node.value[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            vec![index.len(), cols],
            out,
            &[a],
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, &[a], Op::Reshape { a }))
    }

    /// Mean over rows of `-log softmax(logits_row)[target_row]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let node = self.node(logits);
        let (rows, cols) = (node.rows(), node.cols());
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: node.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::ClassOutOfRange {
                class: t,
                classes: cols,
            });
        }
        if node.value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let mut probs = node.value.clone();
        let mut row_loss = Vec::with_capacity(rows);
        for (row, &t) in probs.chunks_mut(cols).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row_loss.push(lse - row[t]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = row_loss.iter().sum::<f64>() / rows as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                row_loss,
            },
        ))
    }

    /// Additive decomposition of the element sum of `v`: cross-entropy
    /// splits into its per-row terms, and sums, concatenations, same-shape
    /// additions and scalings pass through to their inputs. Any other node
    /// contributes its own elements. Two evaluations of the same graph
    /// structure can be differenced term by term, which keeps the rounding
    /// of the final reduction out of the difference.
    pub fn loss_terms(&self, v: Var) -> Vec<f64> {
        let mut out = Vec::new();
        self.collect_terms(v, 1.0, &mut out);
        out
    }

    fn collect_terms(&self, v: Var, factor: f64, out: &mut Vec<f64>) {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::CrossEntropy { row_loss, .. } => {
                let w = factor / row_loss.len() as f64;
                out.extend(row_loss.iter().map(|l| w * l));
            }
            &Op::Sum { a } | &Op::Reshape { a } => self.collect_terms(a, factor, out),
            &Op::Scale { a, factor: f } => self.collect_terms(a, factor * f, out),
            &Op::Add { a, b, bc: Broadcast::Same } => {
                self.collect_terms(a, factor, out);
                self.collect_terms(b, factor, out);
            }
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => {
                for &p in parts {
                    self.collect_terms(p, factor, out);
                }
            }
            _ => out.extend(node.value.iter().map(|x| factor * x)),
        }
    }

    /// Computes the adjoint of every node reachable backwards from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds each parameter leaf's gradient into
    /// the store. Gradients accumulate across calls until zeroed.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            let tensor = &mut store.get_mut(id).tensor;
            match grads.wrt(v) {
                Some(g) => tensor.accumulate_grad(g),
                // unreachable from the loss: gradient is exactly zero
                None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let send = |v: Var, grads: &mut [Option<Vec<f64>>], mut delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            if let Some(hook) = self.grad_hook {
                hook(node.op.name(), &mut delta);
            }
            match &mut grads[v.0] {
                Some(acc) => axpy(1.0, &delta, acc),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, n, p } => {
                if wants(a) {
                    let mut da = vec![0.0; m * n];
                    matmul_t_acc(g, val(b), &mut da, m, p, n);
                    send(a, grads, da);
                }
                if wants(b) {
                    let mut db = vec![0.0; n * p];
                    matmul_tn_acc(val(a), g, &mut db, m, n, p);
                    send(b, grads, db);
                }
            }
            &Op::MatMulT { a, b, m, n, p } => {
                if wants(a) {
                    let mut da = vec![0.0; m * n];
                    matmul_acc(g, val(b), &mut da, m, p, n);
                    send(a, grads, da);
                }
                if wants(b) {
                    let mut db = vec![0.0; p * n];
                    matmul_tn_acc(g, val(a), &mut db, m, p, n);
                    send(b, grads, db);
                }
            }
            &Op::Add { a, b, bc } => {
                let total: f64 = g.iter().sum();
                match bc {
                    Broadcast::Same => {
                        send(a, grads, g.to_vec());
                        send(b, grads, g.to_vec());
                    }
                    Broadcast::LhsScalar => {
                        send(a, grads, vec![total]);
                        send(b, grads, g.to_vec());
                    }
                    Broadcast::RhsScalar => {
                        send(a, grads, g.to_vec());
                        send(b, grads, vec![total]);
                    }
                }
            }
            &Op::Mul { a, b, bc } => {
                let (va, vb) = (val(a), val(b));
                match bc {
                    Broadcast::Same => {
                        if wants(a) {
                            send(a, grads, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                        }
                        if wants(b) {
                            send(b, grads, g.iter().zip(va).map(|(x, y)| x * y).collect());
                        }
                    }
                    Broadcast::LhsScalar => {
                        let s = va[0];
                        if wants(a) {
                            let d = g.iter().zip(vb).map(|(x, y)| x * y).sum();
                            send(a, grads, vec![d]);
                        }
                        if wants(b) {
                            send(b, grads, g.iter().map(|x| x * s).collect());
                        }
                    }
                    Broadcast::RhsScalar => {
                        let s = vb[0];
                        if wants(a) {
                            send(a, grads, g.iter().map(|x| x * s).collect());
                        }
                        if wants(b) {
                            let d = g.iter().zip(va).map(|(x, y)| x * y).sum();
                            send(b, grads, vec![d]);
                        }
                    }
                }
            }
            &Op::AddRow { a, row } => {
                send(a, grads, g.to_vec());
                if wants(row) {
                    let cols = self.nodes[row.0].value.len();
                    let mut dr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        axpy(1.0, chunk, &mut dr);
                    }
                    send(row, grads, dr);
                }
            }
            &Op::Scale { a, factor } => {
                send(a, grads, g.iter().map(|x| x * factor).collect());
            }
            &Op::Unary { a, kind } => {
                let d = match kind {
                    Unary::Sigmoid => g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect(),
                    Unary::Gelu => g
                        .iter()
                        .zip(val(a))
                        .map(|(gi, &x)| gi * gelu_grad(x))
                        .collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(val(a))
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                };
                send(a, grads, d);
            }
            &Op::Softmax { a } => {
                let cols = node.cols();
                let mut d = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks(cols)
                    .zip(node.value.chunks(cols))
                    .zip(d.chunks_mut(cols))
                {
                    let inner: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - inner);
                    }
                }
                send(a, grads, d);
            }
            Op::GatedSoftmax {
                scores,
                gate,
                n_real,
                unweighted,
            } => {
                let cols = node.cols();
                let mut ds = vec![0.0; g.len()];
                let mut dg = 0.0;
                for (((gr, wr), ur), dr) in g
                    .chunks(cols)
                    .zip(node.value.chunks(cols))
                    .zip(unweighted.chunks(cols))
                    .zip(ds.chunks_mut(cols))
                {
                    let inner: f64 = gr.iter().zip(wr).map(|(x, y)| x * y).sum();
                    for j in 0..cols {
                        dr[j] = wr[j] * (gr[j] - inner);
                    }
                    let prefix_mass: f64 = ur[*n_real..].iter().sum();
                    let direct: f64 = gr[*n_real..]
                        .iter()
                        .zip(&ur[*n_real..])
                        .map(|(x, y)| x * y)
                        .sum();
                    dg += direct - inner * prefix_mass;
                }
                send(*scores, grads, ds);
                send(*gate, grads, vec![dg]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.cols();
                let gv = val(*gain);
                if wants(*gain) || wants(*bias) {
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dgain[c] += gr[c] * xr[c];
                            dbias[c] += gr[c];
                        }
                    }
                    send(*gain, grads, dgain);
                    send(*bias, grads, dbias);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((gr, xr), dr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[c];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            dr[c] = rstd[r] * (dxh - mean_dxh - xr[c] * mean_dxh_xh);
                        }
                    }
                    send(*x, grads, dx);
                }
            }
            &Op::MeanRows { a } => {
                let rows = self.nodes[a.0].rows();
                let scaled: Vec<f64> = g.iter().map(|v| v / rows as f64).collect();
                let d = scaled.repeat(rows);
                send(a, grads, d);
            }
            &Op::Sum { a } => {
                let n = self.nodes[a.0].value.len();
                send(a, grads, vec![g[0]; n]);
            }
            &Op::SliceCols { a, start } => {
                let src = &self.nodes[a.0];
                let (cols, len) = (src.cols(), node.cols());
                let mut d = vec![0.0; src.value.len()];
                for (dr, gr) in d.chunks_mut(cols).zip(g.chunks(len)) {
                    dr[start..start + len].copy_from_slice(gr);
                }
                send(a, grads, d);
            }
            Op::ConcatCols { parts } => {
                let total = node.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(self.nodes[p.0].value.len());
                        for gr in g.chunks(total) {
                            d.extend_from_slice(&gr[offset..offset + c]);
                        }
                        send(p, grads, d);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if wants(p) {
                        send(p, grads, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::GatherRows { a, index } => {
                let src = &self.nodes[a.0];
                let cols = src.cols();
                let mut d = vec![0.0; src.value.len()];
                for (gr, &i) in g.chunks(cols).zip(index) {
                    axpy(1.0, gr, &mut d[i * cols..(i + 1) * cols]);
                }
                send(*a, grads, d);
            }
            &Op::Reshape { a } => send(a, grads, g.to_vec()),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                ..
            } => {
                let cols = self.nodes[logits.0].cols();
                let rows = targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / rows).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] -= g[0] / rows;
                }
                send(*logits, grads, d);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
