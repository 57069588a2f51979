//! Eager computation graph with reverse-mode differentiation.
//!
//! Every op evaluates immediately and appends a node to the tape. Nodes are
//! only differentiated when at least one input requires a gradient, so
//! frozen sub-networks cost nothing during `backward`.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::ParameterSet;
use super::tensor::{dot, gemm, Tensor};
use crate::error::{contract, shape_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One attention segment: query rows `[q_start, q_start + q_len)` attend to
/// key/value rows `[k_start, k_start + k_len)`.
///
/// With `causal`, query `i` sees keys `0..=i + (k_len - q_len)`. Several spans
/// may share one key range (e.g. beam hypotheses over one encoder memory).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpan {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub causal: bool,
}

enum Op {
    Leaf,
    Param(String),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    GatherElems { x: Var, pos: Vec<(usize, usize)> },
    EmbeddingBag { weights: Var, table: Var, idx: Vec<usize> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<AttnSpan>,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v` (None if unreachable).
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradients (inference).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bind a named parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, set: &ParameterSet, name: &str) -> Result<Var> {
        let p = set.get(name)?;
        let requires_grad = self.grad_enabled && !p.is_frozen();
        self.nodes.push(Node {
            value: p.shared(),
            op: Op::Param(name.to_string()),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a @ b`, or `a @ b^T` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("{m}x{k} times {}{br}x{bc}", if trans_b { "T " } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + s).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    /// Broadcast-add a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(row).numel() != n {
            return Err(shape_err(
                "add_row",
                format!("row of {} for {m}x{n}", self.value(row).numel()),
            ));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(n.max(1)) {
            add_into(chunk, r);
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, n) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, n) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(n.max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log_softmax", value, Op::LogSoftmax(a), &[a])
    }

    /// Row-wise layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(shape_err("layer_norm", "gain/bias width"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &t.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..n {
                let h = (row[c] - mean) * s;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Gather rows `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = t.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(shape_err("embedding", format!("id {id} >= {rows}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Pick individual entries `x[r, c]`; result is `P x 1`.
    pub fn gather_elems(&mut self, x: Var, pos: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let mut out = Vec::with_capacity(pos.len());
        for &(r, c) in pos {
            if r >= m || c >= n {
                return Err(shape_err("gather_elems", format!("({r},{c}) outside {m}x{n}")));
            }
            out.push(t.data()[r * n + c]);
        }
        let value = Tensor::matrix(pos.len(), 1, out)?;
        self.push(
            "gather_elems",
            value,
            Op::GatherElems {
                x,
                pos: pos.to_vec(),
            },
            &[x],
        )
    }

    /// `out[i] = sum_j weights[i, j] * table[idx[i * K + j]]` for `N x K` weights.
    pub fn embedding_bag(&mut self, weights: Var, table: Var, idx: &[usize]) -> Result<Var> {
        let (nrows, k) = self.value(weights).dims2();
        let (trows, d) = self.value(table).dims2();
        if idx.len() != nrows * k {
            return Err(shape_err("embedding_bag", "index count != weights size"));
        }
        let w = self.value(weights).data();
        let tab = self.value(table);
        let mut out = vec![0.0; nrows * d];
        for i in 0..nrows {
            let dst = &mut out[i * d..(i + 1) * d];
            for j in 0..k {
                let row = idx[i * k + j];
                if row >= trows {
                    return Err(shape_err("embedding_bag", format!("row {row} >= {trows}")));
                }
                let a = w[i * k + j];
                dst.iter_mut().zip(tab.row(row)).for_each(|(o, v)| *o += a * v);
            }
        }
        let value = Tensor::matrix(nrows, d, out)?;
        self.push(
            "embedding_bag",
            value,
            Op::EmbeddingBag {
                weights,
                table,
                idx: idx.to_vec(),
            },
            &[weights, table],
        )
    }

    /// Multi-head scaled dot-product attention over packed segments.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[AttnSpan],
        heads: usize,
    ) -> Result<Var> {
        let (nq, d) = self.value(q).dims2();
        let (nk, dk) = self.value(k).dims2();
        let (nv, dv) = self.value(v).dims2();
        if dk != d || dv != d || nv != nk {
            return Err(shape_err("attention", "q/k/v widths or k/v rows differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("{d} not divisible by {heads} heads")));
        }
        let mut covered = vec![false; nq];
        for s in spans {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk || s.k_len == 0 {
                return Err(shape_err("attention", format!("span {s:?} out of range")));
            }
            if s.causal && s.k_len < s.q_len {
                return Err(shape_err("attention", "causal span with fewer keys than queries"));
            }
            for c in &mut covered[s.q_start..s.q_start + s.q_len] {
                if *c {
                    return Err(shape_err("attention", "overlapping query spans"));
                }
                *c = true;
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        for s in spans {
            let shift = s.k_len - s.q_len.min(s.k_len);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let qi = &qd[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    let visible = if s.causal { i + shift + 1 } else { s.k_len };
                    let base = probs.len();
                    for j in 0..s.k_len {
                        if j < visible {
                            let kj = &kd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                            probs.push(dot(qi, kj) * scale);
                        } else {
                            probs.push(f64::NEG_INFINITY);
                        }
                    }
                    softmax_in_place(&mut probs[base..]);
                    let o = &mut out[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    for j in 0..visible {
                        let p = probs[base + j];
                        let vj = &vd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                        o.iter_mut().zip(vj).for_each(|(o, v)| *o += p * v);
                    }
                }
            }
        }
        let value = Tensor::matrix(nq, d, out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        if parts.iter().any(|p| self.value(*p).rows() != m) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| contract("concat of zero tensors"))?;
        if parts.iter().any(|p| self.value(*p).cols() != n) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
            m += self.value(*p).rows();
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if start + len > n {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {n}")));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(m, len, out)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if start + len > m {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {m}")));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::matrix(len, n, out)?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.nodes[x.0].value).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Sum of all entries (scalar).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut params: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads[id]) {
                match params.get_mut(name) {
                    Some(acc) => add_into(acc, g),
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Zero-initialised gradient buffer for an input.
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = val(*a).dims2();
                let n = node.value.cols();
                if wants(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).data(), !*trans_b, da, 1.0);
                }
                if wants(*b) {
                    let db = slot(grads, *b, k * n);
                    if *trans_b {
                        gemm(n, m, k, g, true, val(*a).data(), false, db, 1.0);
                    } else {
                        gemm(k, m, n, val(*a).data(), true, g, false, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    slot(grads, *b, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    let d = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * other[i];
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    let d = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    slot(grads, *a, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, v)| *d += s * v);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*row) {
                    let n = val(*row).numel();
                    let d = slot(grads, *row, n);
                    for chunk in g.chunks_exact(n.max(1)) {
                        add_into(d, chunk);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let out = node.value.data();
                    let d = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if out[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let n = node.value.cols().max(1);
                    let y = node.value.data();
                    let d = slot(grads, *a, g.len());
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let s = dot(gr, yr);
                        for c in 0..n {
                            dr[c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if wants(*a) {
                    let n = node.value.cols().max(1);
                    let y = node.value.data();
                    let d = slot(grads, *a, g.len());
                    for ((dr, gr), yr) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let s: f64 = gr.iter().sum();
                        for c in 0..n {
                            dr[c] += gr[c] - yr[c].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = node.value.dims2();
                if wants(*gain) {
                    let dg = slot(grads, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if wants(*bias) {
                    let db = slot(grads, *bias, n);
                    for chunk in g.chunks_exact(n) {
                        add_into(db, chunk);
                    }
                }
                if wants(*x) {
                    let gv = val(*gain).data();
                    let dx = slot(grads, *x, m * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xr) / n as f64;
                        for c in 0..n {
                            dx[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let t = val(*table);
                    let d = t.cols();
                    let dt = slot(grads, *table, t.numel());
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::GatherElems { x, pos } => {
                if wants(*x) {
                    let t = val(*x);
                    let n = t.cols();
                    let dx = slot(grads, *x, t.numel());
                    for (p, &(r, c)) in pos.iter().enumerate() {
                        dx[r * n + c] += g[p];
                    }
                }
            }
            Op::EmbeddingBag {
                weights,
                table,
                idx,
            } => {
                let (nrows, k) = val(*weights).dims2();
                let tab = val(*table);
                let d = tab.cols();
                if wants(*weights) {
                    let dw = slot(grads, *weights, nrows * k);
                    for i in 0..nrows {
                        for j in 0..k {
                            dw[i * k + j] += dot(&g[i * d..(i + 1) * d], tab.row(idx[i * k + j]));
                        }
                    }
                }
                if wants(*table) {
                    let w = val(*weights).data();
                    let dt = slot(grads, *table, tab.numel());
                    for i in 0..nrows {
                        let gi = &g[i * d..(i + 1) * d];
                        for j in 0..k {
                            let row = idx[i * k + j];
                            let a = w[i * k + j];
                            dt[row * d..(row + 1) * d]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(o, v)| *o += a * v);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            } => {
                let (nq, d) = val(*q).dims2();
                let nk = val(*k).rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut base = 0;
                let mut dp = Vec::new();
                for s in spans {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..s.q_len {
                            let qrow = (s.q_start + i) * d + off;
                            let gi = &g[qrow..qrow + dh];
                            let p = &probs[base..base + s.k_len];
                            dp.clear();
                            for j in 0..s.k_len {
                                let krow = (s.k_start + j) * d + off;
                                dp.push(dot(gi, &vd[krow..krow + dh]));
                                if p[j] != 0.0 {
                                    dv[krow..krow + dh]
                                        .iter_mut()
                                        .zip(gi)
                                        .for_each(|(o, x)| *o += p[j] * x);
                                }
                            }
                            let s_dot = dot(&dp, p);
                            for j in 0..s.k_len {
                                let ds = p[j] * (dp[j] - s_dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (s.k_start + j) * d + off;
                                for c in 0..dh {
                                    dq[qrow + c] += ds * kd[krow + c];
                                    dk[krow + c] += ds * qd[qrow + c];
                                }
                            }
                            base += s.k_len;
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(var) {
                        let n = buf.len();
                        add_into(slot(grads, var, n), &buf);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut col = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if wants(*p) {
                        let dp = slot(grads, *p, m * w);
                        for r in 0..m {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * n + col..r * n + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).numel();
                    if wants(*p) {
                        add_into(slot(grads, *p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (m, n) = val(*x).dims2();
                    let w = node.value.cols();
                    let dx = slot(grads, *x, m * n);
                    for r in 0..m {
                        add_into(&mut dx[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let n = val(*x).cols();
                    let dx = slot(grads, *x, val(*x).numel());
                    add_into(&mut dx[start * n..start * n + g.len()], g);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = val(*x).numel();
                    slot(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
