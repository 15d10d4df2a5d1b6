use std::borrow::Cow;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sum(Var),
    Watch(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    ReplaceRow { base: Var, row: usize, src: Var },
    Element { x: Var, index: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are stored at record time; [`Tape::backward`] walks the record
/// once in reverse and returns the gradient of every node that the loss
/// reaches.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    backward_calls: usize,
}

/// Gradient accumulators keyed by node identity.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    visited: usize,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when unreachable.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.sizes[v.0]],
        }
    }

    /// Moves the gradient of `v` out, zero-filled when unreachable.
    pub fn take(&mut self, v: Var) -> Vec<f64> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => vec![0.0; self.sizes[v.0]],
        }
    }

    /// Number of recorded operations visited by the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many times [`Tape::backward`] has run on this tape.
    pub fn backward_calls(&self) -> usize {
        self.backward_calls
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Borrowed leaf; used for model parameters so no weights are copied.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`; the layout of linear-layer weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let shape_err = || Error::Shape {
            op: if tb { "matmul_nt" } else { "matmul" },
            lhs: at.shape().to_vec(),
            rhs: bt.shape().to_vec(),
        };
        if bt.shape().len() != 2 {
            return Err(shape_err());
        }
        let (m, k) = (at.rows(), at.cols());
        let (kb, n) = if tb { (bt.shape()[1], bt.shape()[0]) } else { (bt.shape()[0], bt.shape()[1]) };
        if k != kb {
            return Err(shape_err());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, at.data(), false, bt.data(), tb, &mut out, false);
        let mut shape = at.shape()[..at.shape().len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b, tb }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = at.shape().to_vec();
        let ng = self.ng(&[a, b]);
        self.push(Tensor { shape, data }, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddConst(x))
    }

    /// `c - x`
    pub fn rsub_const(&mut self, c: f64, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_const(neg, c)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Identity that always participates in the reverse sweep, so the
    /// gradient with respect to an intermediate activation is recorded even
    /// when no upstream leaf requires one.
    pub fn watch(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Watch(x), true)
    }

    /// Row-wise layer normalization over the last axis, then `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: xt.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xt.rows();
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xt.numel()];
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = xt.shape().to_vec();
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut data = t.data().to_vec();
        let c = t.cols();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, Op::Softmax(x), ng)
    }

    /// Gathers rows of `table` (shape `[V×d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("embedding id {bad} out of range {v}")));
        }
        if ids.is_empty() {
            return Err(Error::Input("embedding of empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(Tensor { shape: vec![ids.len(), d], data }, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Input(format!("row selection {rows:?} out of range {n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor { shape: vec![rows.len(), d], data }, Op::SelectRows { x, rows: rows.to_vec() }, ng))
    }

    /// Copy of `base` with row `row` replaced by the single row in `src`.
    pub fn replace_row(&mut self, base: Var, row: usize, src: Var) -> Result<Var> {
        let (bt, st) = (self.value(base), self.value(src));
        if st.numel() != bt.cols() || row >= bt.rows() {
            return Err(Error::Shape { op: "replace_row", lhs: bt.shape().to_vec(), rhs: st.shape().to_vec() });
        }
        let mut value = bt.clone();
        value.row_mut(row).copy_from_slice(st.data());
        let ng = self.ng(&[base, src]);
        Ok(self.push(value, Op::ReplaceRow { base, row, src }, ng))
    }

    /// Scalar at flat `index`.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t
            .data()
            .get(index)
            .ok_or_else(|| Error::Input(format!("element {index} out of range {}", t.numel())))?;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Element { x, index }, ng))
    }

    /// Mean over rows of `-log softmax(logits_r)[target_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, c) = (t.rows(), t.cols());
        if targets.len() != rows || targets.iter().any(|&y| y >= c) {
            return Err(Error::Input(format!("cross_entropy targets {targets:?} for logits {:?}", t.shape())));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[targets[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N×d]`; `segments` lists `(start_row, len)` of each
    /// sequence. Positions attend only to earlier or equal positions of their
    /// own segment.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[(usize, usize)]) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qt.rows(), qt.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d={d} not divisible by heads={heads}")));
        }
        let covered: usize = segments.iter().map(|s| s.1).sum();
        if covered != n || segments.iter().any(|&(s, l)| l == 0 || s + l > n) {
            return Err(Error::Input(format!("segments {segments:?} do not tile {n} rows")));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let prob_len: usize = segments.iter().map(|&(_, l)| heads * l * l).sum();
        let mut probs = vec![0.0; prob_len];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut off = 0;
        for &(start, len) in segments {
            for h in 0..heads {
                let p = &mut probs[off..off + len * len];
                off += len * len;
                for i in 0..len {
                    let qi = &qd[(start + i) * d + h * hd..(start + i) * d + (h + 1) * hd];
                    let row = &mut p[i * len..(i + 1) * len];
                    for j in 0..=i {
                        let kj = &kd[(start + j) * d + h * hd..(start + j) * d + (h + 1) * hd];
                        row[j] = super::dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    let o = &mut out[(start + i) * d + h * hd..(start + i) * d + (h + 1) * hd];
                    for j in 0..=i {
                        let w = row[j];
                        let vj = &vd[(start + j) * d + h * hd..(start + j) * d + (h + 1) * hd];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += w * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Tensor { shape: vec![n, d], data: out },
            Op::CausalAttention { q, k, v, heads, segments: segments.to_vec(), probs },
            ng,
        ))
    }

    /// Single reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.backward_calls += 1;
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = 0;
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads, sizes, visited });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            visited += 1;
            self.backward_op(node, g, lo, &sizes);
        }
        Ok(Gradients { grads, sizes, visited })
    }

    fn backward_op(&self, node: &Node<'a>, g: &[f64], lo: &mut [Option<Vec<f64>>], sizes: &[usize]) {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb } => {
                let (at, bt) = (val(a), val(b));
                let (m, k) = (at.rows(), at.cols());
                let n = node.value.cols();
                if ng(a) {
                    let da = slot(lo, a, sizes[a.0]);
                    // dA = g · op(b)ᵀ
                    gemm(m, n, k, g, false, bt.data(), !tb, da, true);
                }
                if ng(b) {
                    let db = slot(lo, b, sizes[b.0]);
                    if tb {
                        gemm(n, m, k, g, true, at.data(), false, db, true);
                    } else {
                        gemm(k, m, n, at.data(), true, g, false, db, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if ng(v) {
                        axpy(slot(lo, v, sizes[v.0]), sign, g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if ng(v) {
                        axpy(slot(lo, v, sizes[v.0]), sign, g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if ng(v) {
                        let o = val(other).data();
                        let d = slot(lo, v, sizes[v.0]);
                        for ((dd, gg), oo) in d.iter_mut().zip(g).zip(o) {
                            *dd += gg * oo;
                        }
                    }
                }
            }
            &Op::Scale(x, s) => {
                if ng(x) {
                    axpy(slot(lo, x, sizes[x.0]), s, g);
                }
            }
            &Op::AddConst(x) => {
                if ng(x) {
                    axpy(slot(lo, x, sizes[x.0]), 1.0, g);
                }
            }
            &Op::Watch(x) => {
                if ng(x) {
                    axpy(slot(lo, x, sizes[x.0]), 1.0, g);
                }
            }
            &Op::Sum(x) => {
                if ng(x) {
                    slot(lo, x, sizes[x.0]).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.cols();
                let gv = val(*gain).data();
                if ng(*gain) {
                    let dg = slot(lo, *gain, d);
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            dg[j] += gr[j] * xhat[r * d + j];
                        }
                    }
                }
                if ng(*bias) {
                    let db = slot(lo, *bias, d);
                    for gr in g.chunks(d) {
                        axpy(db, 1.0, gr);
                    }
                }
                if ng(*x) {
                    let dx = slot(lo, *x, sizes[x.0]);
                    let mut dxhat = vec![0.0; d];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            mean_dxh += dxhat[j];
                            mean_dxh_xh += dxhat[j] * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        let rs = rstd[r];
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rs * (dxhat[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if ng(x) {
                    let xv = val(x).data();
                    let dx = slot(lo, x, sizes[x.0]);
                    for ((dd, gg), &xx) in dx.iter_mut().zip(g).zip(xv) {
                        *dd += gg * gelu_grad(xx);
                    }
                }
            }
            &Op::Softmax(x) => {
                if ng(x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let dx = slot(lo, x, sizes[x.0]);
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = super::dot(gr, yr);
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if ng(*table) {
                    let d = node.value.cols();
                    let dt = slot(lo, *table, sizes[table.0]);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if ng(*x) {
                    let d = node.value.cols();
                    let dx = slot(lo, *x, sizes[x.0]);
                    for (j, &r) in rows.iter().enumerate() {
                        axpy(&mut dx[r * d..(r + 1) * d], 1.0, &g[j * d..(j + 1) * d]);
                    }
                }
            }
            &Op::ReplaceRow { base, row, src } => {
                let d = node.value.cols();
                if ng(base) {
                    let db = slot(lo, base, sizes[base.0]);
                    for (r, (dr, gr)) in db.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        if r != row {
                            axpy(dr, 1.0, gr);
                        }
                    }
                }
                if ng(src) {
                    axpy(slot(lo, src, sizes[src.0]), 1.0, &g[row * d..(row + 1) * d]);
                }
            }
            &Op::Element { x, index } => {
                if ng(x) {
                    slot(lo, x, sizes[x.0])[index] += g[0];
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if ng(*logits) {
                    let c = val(*logits).cols();
                    let scale = g[0] / targets.len() as f64;
                    let dl = slot(lo, *logits, sizes[logits.0]);
                    for (r, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::CausalAttention { q, k, v, heads, segments, probs } => {
                self.attention_backward(*q, *k, *v, *heads, segments, probs, g, lo, sizes);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
        probs: &[f64],
        g: &[f64],
        lo: &mut [Option<Vec<f64>>],
        sizes: &[usize],
    ) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let n = qt.numel();
        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut off = 0;
        let mut dp = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let p = &probs[off..off + len * len];
                off += len * len;
                let col = |row: usize| (start + row) * d + h * hd..(start + row) * d + (h + 1) * hd;
                dp.clear();
                dp.resize(len, 0.0);
                for i in 0..len {
                    let gi = &g[col(i)];
                    let pi = &p[i * len..(i + 1) * len];
                    // dP_ij = g_i · v_j ; dV_j += P_ij g_i
                    for j in 0..=i {
                        dp[j] = super::dot(gi, &vd[col(j)]);
                        let w = pi[j];
                        for (dd, gg) in dv[col(j)].iter_mut().zip(gi) {
                            *dd += w * gg;
                        }
                    }
                    let s: f64 = (0..=i).map(|j| dp[j] * pi[j]).sum();
                    for j in 0..=i {
                        let ds = pi[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let (qi, kj) = (col(i), col(j));
                        for t in 0..hd {
                            dq[qi.start + t] += ds * kd[kj.start + t];
                            dk[kj.start + t] += ds * qd[qi.start + t];
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                axpy(slot(lo, var, sizes[var.0]), 1.0, &grad);
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::eye(2), false);
        let m = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]), false);
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let a = tape.leaf(t(&[1, 2], &[1., 2.]), false);
        let b = tape.leaf(t(&[2, 1], &[3., 4.]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let ones = tape.leaf(Tensor::filled(&[2], 1.0), false);
        let zeros = tape.leaf(Tensor::zeros(&[2]), false);
        let c = tape.leaf(t(&[1, 2], &[5., 5.]), false);
        let y = tape.layer_norm(c, ones, zeros).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0.]);

        let x = tape.leaf(t(&[1, 2], &[1., 3.]), false);
        let y = tape.layer_norm(x, ones, zeros).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        let out = tape.value(y).data();
        assert!((out[0] + expect).abs() < 1e-15 && (out[1] - expect).abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        for x in [10.0, 25.0, 100.0] {
            assert!((gelu(x) - x).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::filled(&[1, 4], 0.7), false);
        let p = tape.softmax(u);
        for v in tape.value(p).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = tape.leaf(t(&[1, 2], &[0.0, 3f64.ln()]), false);
        let p = tape.softmax(x);
        let d = tape.value(p).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

        let raw = [0.3, -1.2, 4.0, 2.2];
        let shifted: Vec<f64> = raw.iter().map(|v| v + 123.0).collect();
        let a = tape.leaf(t(&[1, 4], &raw), false);
        let b = tape.leaf(t(&[1, 4], &shifted), false);
        let (pa, pb) = (tape.softmax(a), tape.softmax(b));
        let s: f64 = tape.value(pa).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for (x, y) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_linear_and_detached() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let y = tape.leaf(t(&[3], &[1., 1., 1.]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), vec![1.0; 6]);
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y), vec![0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        assert_eq!(tape.backward_calls(), 0);
    }

    #[test]
    fn fan_out_gradients_sum() {
        // loss = sum(x) + sum(x) + sum(x*x): dx = 2 + 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 0.5]), true);
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let sq = tape.mul(x, x).unwrap();
        let s3 = tape.sum(sq);
        let a = tape.add(s1, s2).unwrap();
        let l = tape.add(a, s3).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x), vec![4.0, -2.0, 3.0]);
        assert!(g.visited() <= tape.len());
    }
}
