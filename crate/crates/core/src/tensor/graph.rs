use super::kernels::{self, log_softmax_columns, matmul, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTN(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddColumn(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clip(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Vec<usize>,
        causal: bool,
        softmax: bool,
        scale: f64,
        weights: Vec<f64>,
    },
    SparseMix(Var, Vec<(usize, usize, f64)>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation record. Node inputs always precede the node, so
/// insertion order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(Op::Leaf, t, needs_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn checked(&mut self, op_name: &'static str, op: Op, value: Tensor, needs: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(op, value, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.checked("matmul", Op::MatMul(a, b), out, needs)
    }

    /// `aᵀ · b` without materialising the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_tn(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        self.checked("matmul_tn", Op::MatMulTN(a, b), out, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose(a), out, needs))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.checked("add", Op::Add(a, b), out, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.checked("sub", Op::Sub(a, b), out, needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.checked("mul", Op::Mul(a, b), out, needs)
    }

    /// Adds the column vector `b` (`m×1`) to every column of `x` (`m×n`).
    pub fn add_column(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.cols() != 1 || tb.rows() != tx.rows() {
            return Err(Error::shape("add_column", format!("{:?} + column {:?}", tx.shape(), tb.shape())));
        }
        let cols = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + tb.data()[i / cols]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(b);
        self.checked("add_column", Op::AddColumn(x, b), out, needs)
    }

    /// `w · x + b 1ᵀ`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        self.add_column(wx, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scaled(s);
        let needs = self.needs(a);
        self.checked("scale", Op::Scale(a, s), out, needs)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + s);
        let needs = self.needs(a);
        self.checked("add_scalar", Op::AddScalar(a), out, needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let needs = self.needs(a);
        Ok(self.push(Op::Relu(a), out, needs))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let needs = self.needs(a);
        self.checked("exp", Op::Exp(a), out, needs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        let needs = self.needs(a);
        self.checked("log", Op::Log(a), out, needs)
    }

    /// Clamp to `[-bound, bound]`; the subgradient is 1 on the closed interval.
    pub fn clip(&mut self, a: Var, bound: f64) -> Result<Var> {
        let out = super::clip(self.value(a), bound)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Clip(a, bound), out, needs))
    }

    /// Normalises each column over its rows, then applies per-row `gamma`, `beta` (`d×1`).
    pub fn layer_norm_columns(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (d, n) = (tx.rows(), tx.cols());
        for p in [gamma, beta] {
            let tp = self.value(p);
            if tp.rows() != d || tp.cols() != 1 {
                return Err(Error::shape("layer_norm", format!("affine {:?} for {d} rows", tp.shape())));
            }
        }
        let xs = tx.data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; d * n];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; d * n];
        for c in 0..n {
            let mean = (0..d).map(|r| xs[r * n + c]).sum::<f64>() / d as f64;
            let var = (0..d).map(|r| (xs[r * n + c] - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[c] = inv;
            for r in 0..d {
                let h = (xs[r * n + c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = g[r] * h + b[r];
            }
        }
        let out = Tensor::matrix(d, n, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.checked(
            "layer_norm",
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            needs,
        )
    }

    /// Column-wise softmax of `x + mask`, mask entries in `{0, -inf}`.
    pub fn masked_softmax_columns(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        let admit = kernels::mask_admits(tx, mask)?;
        let out = kernels::softmax_columns_admitted(tx, Some(&admit))?;
        let needs = self.needs(x);
        self.checked("masked_softmax_columns", Op::Softmax(x), out, needs)
    }

    pub fn softmax_columns(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_columns_admitted(self.value(x), None)?;
        let needs = self.needs(x);
        self.checked("softmax_columns", Op::Softmax(x), out, needs)
    }

    pub fn log_softmax_columns(&mut self, x: Var) -> Result<Var> {
        let out = log_softmax_columns(self.value(x));
        let needs = self.needs(x);
        self.checked("log_softmax_columns", Op::LogSoftmax(x), out, needs)
    }

    /// Stacks inputs vertically; all must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {cols} columns", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, needs))
    }

    /// Places inputs side by side; all must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{} vs {rows} rows", t.rows())));
            }
            let c = t.cols();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(t.row_slice(r));
            }
            offset += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, needs))
    }

    /// `out[:, j] = x[:, idx[j]]`; backward scatters into the source columns.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::shape("gather_cols", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::Index { index: bad, len: cols });
        }
        let n = idx.len();
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let src = t.row_slice(r);
            for (j, &i) in idx.iter().enumerate() {
                data[r * n + j] = src[i];
            }
        }
        let needs = self.needs(x);
        let out = Tensor::matrix(rows, n, data)?;
        Ok(self.push(Op::GatherCols(x, idx.to_vec()), out, needs))
    }

    /// Picks entries by flat (row-major) index into an `n×1` column.
    pub fn select(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if flat.is_empty() {
            return Err(Error::shape("select", "empty index list"));
        }
        if let Some(&bad) = flat.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Index { index: bad, len: t.len() });
        }
        let data = flat.iter().map(|&i| t.data()[i]).collect();
        let needs = self.needs(x);
        let out = Tensor::matrix(flat.len(), 1, data)?;
        Ok(self.push(Op::Select(x, flat.to_vec()), out, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.checked("sum", Op::Sum(x), Tensor::scalar(s), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let needs = self.needs(x);
        self.checked("mean", Op::Mean(x), Tensor::scalar(s), needs)
    }

    /// Self-attention applied independently to consecutive column blocks.
    ///
    /// For a block with columns `s..s+n`, `S[r][c] = q_rᵀ k_c / scale` and the
    /// output column `c` is `Σ_r v_r A[r][c]`, where `A` is the column-wise
    /// softmax of `S` (or `S` itself when `softmax` is false). With `causal`,
    /// column `c` only admits rows `r <= c`.
    #[allow(clippy::too_many_arguments)]
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, blocks: &[usize], causal: bool, softmax: bool, scale: f64) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::shape(
                "block_attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let (d, total) = (tq.rows(), tq.cols());
        if blocks.iter().any(|&b| b == 0) || blocks.iter().sum::<usize>() != total {
            return Err(Error::shape("block_attention", format!("blocks {blocks:?} for {total} columns")));
        }
        if !(scale > 0.0) {
            return Err(Error::Contract(format!("attention scale must be positive, got {scale}")));
        }
        let (qt, kt, vt) = (tq.transpose(), tk.transpose(), tv.transpose());
        let (qt, kt, vt) = (qt.data(), kt.data(), vt.data());
        let mut out_t = vec![0.0; total * d];
        let mut weights = Vec::with_capacity(blocks.iter().map(|b| b * b).sum());
        let mut start = 0;
        for &n in blocks {
            let base = weights.len();
            for r in 0..n {
                for c in 0..n {
                    let s = kernels::dot(&qt[(start + r) * d..(start + r + 1) * d], &kt[(start + c) * d..(start + c + 1) * d]) / scale;
                    weights.push(if causal && r > c && !softmax { 0.0 } else { s });
                }
            }
            let a = &mut weights[base..];
            if softmax {
                for c in 0..n {
                    let rows = if causal { c + 1 } else { n };
                    let max = (0..rows).map(|r| a[r * n + c]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for r in 0..rows {
                        let e = (a[r * n + c] - max).exp();
                        a[r * n + c] = e;
                        z += e;
                    }
                    for r in 0..n {
                        a[r * n + c] = if r < rows { a[r * n + c] / z } else { 0.0 };
                    }
                }
            }
            for c in 0..n {
                let dst = &mut out_t[(start + c) * d..(start + c + 1) * d];
                for r in 0..n {
                    let w = a[r * n + c];
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &vv) in dst.iter_mut().zip(&vt[(start + r) * d..(start + r + 1) * d]) {
                        *o += w * vv;
                    }
                }
            }
            start += n;
        }
        let out = Tensor::matrix(total, d, out_t)?.transpose();
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.checked(
            "block_attention",
            Op::BlockAttention {
                q,
                k,
                v,
                blocks: blocks.to_vec(),
                causal,
                softmax,
                scale,
                weights,
            },
            out,
            needs,
        )
    }

    /// Attention matrices (`A`, one per block) recorded by a
    /// [`Graph::block_attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Tensor>> {
        match &self.nodes[v.0].op {
            Op::BlockAttention { blocks, weights, .. } => {
                let mut out = Vec::with_capacity(blocks.len());
                let mut offset = 0;
                for &n in blocks {
                    out.push(Tensor::matrix(n, n, weights[offset..offset + n * n].to_vec()).ok()?);
                    offset += n * n;
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// `out[:, dst] += w · x[:, src]` for every `(src, dst, w)` entry.
    pub fn sparse_mix(&mut self, x: Var, entries: &[(usize, usize, f64)], out_cols: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if out_cols == 0 {
            return Err(Error::shape("sparse_mix", "zero output columns"));
        }
        let mut data = vec![0.0; rows * out_cols];
        for &(src, dst, w) in entries {
            if src >= cols {
                return Err(Error::Index { index: src, len: cols });
            }
            if dst >= out_cols {
                return Err(Error::Index { index: dst, len: out_cols });
            }
            for r in 0..rows {
                data[r * out_cols + dst] += w * t.data()[r * cols + src];
            }
        }
        let needs = self.needs(x);
        let out = Tensor::matrix(rows, out_cols, data)?;
        self.checked("sparse_mix", Op::SparseMix(x, entries.to_vec()), out, needs)
    }

    /// Reverse sweep from a scalar `loss`; every requires-grad leaf receives
    /// `∂loss/∂leaf` in its tensor's `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            if !self.nodes[k].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[k].op {
                self.nodes[k].value.set_grad(g);
                continue;
            }
            self.propagate(k, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, k: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[k];
        let out = &node.value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let gt = || Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad matches value");

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = matmul_nt(&gt(), tb)?;
                    acc(*a, &|s| add_into(s, da.data()));
                }
                if self.needs(*b) {
                    let db = matmul_tn(ta, &gt())?;
                    acc(*b, &|s| add_into(s, db.data()));
                }
            }
            Op::MatMulTN(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = matmul_nt(tb, &gt())?;
                    acc(*a, &|s| add_into(s, da.data()));
                }
                if self.needs(*b) {
                    let db = matmul(ta, &gt())?;
                    acc(*b, &|s| add_into(s, db.data()));
                }
            }
            Op::Transpose(a) => {
                let d = gt().transpose();
                acc(*a, &|s| add_into(s, d.data()));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| {
                    for (x, &gv) in s.iter_mut().zip(g) {
                        *x -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * tb[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ta[i];
                    }
                });
            }
            Op::AddColumn(x, b) => {
                let cols = out.cols();
                acc(*x, &|s| add_into(s, g));
                acc(*b, &|s| {
                    for (r, sv) in s.iter_mut().enumerate() {
                        *sv += g[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| {
                for (x, &gv) in s.iter_mut().zip(g) {
                    *x += c * gv;
                }
            }),
            Op::AddScalar(a) => acc(*a, &|s| add_into(s, g)),
            Op::Relu(a) => {
                let xs = self.value(*a).data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if xs[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &|s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out.data()[i];
                }
            }),
            Op::Log(a) => {
                let xs = self.value(*a).data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / xs[i];
                    }
                });
            }
            Op::Clip(a, bound) => {
                let xs = self.value(*a).data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if xs[i].abs() <= *bound {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (d, n) = (out.rows(), out.cols());
                let gam = self.value(*gamma).data();
                acc(*gamma, &|s| {
                    for r in 0..d {
                        s[r] += (0..n).map(|c| g[r * n + c] * xhat[r * n + c]).sum::<f64>();
                    }
                });
                acc(*beta, &|s| {
                    for r in 0..d {
                        s[r] += g[r * n..(r + 1) * n].iter().sum::<f64>();
                    }
                });
                acc(*x, &|s| {
                    for c in 0..n {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for r in 0..d {
                            let dh = g[r * n + c] * gam[r];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * n + c];
                        }
                        let df = d as f64;
                        for r in 0..d {
                            let dh = g[r * n + c] * gam[r];
                            s[r * n + c] += inv_std[c] / df * (df * dh - sum_dh - xhat[r * n + c] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (rows, cols) = (out.rows(), out.cols());
                let y = out.data();
                acc(*a, &|s| {
                    for c in 0..cols {
                        let inner: f64 = (0..rows).map(|r| y[r * cols + c] * g[r * cols + c]).sum();
                        for r in 0..rows {
                            let i = r * cols + c;
                            s[i] += y[i] * (g[i] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = (out.rows(), out.cols());
                let y = out.data();
                acc(*a, &|s| {
                    for c in 0..cols {
                        let gsum: f64 = (0..rows).map(|r| g[r * cols + c]).sum();
                        for r in 0..rows {
                            let i = r * cols + c;
                            s[i] += g[i] - y[i].exp() * gsum;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[offset..offset + len];
                    acc(p, &|s| add_into(s, slice));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    acc(p, &|s| {
                        for r in 0..rows {
                            add_into(&mut s[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::GatherCols(x, idx) => {
                let src_cols = self.value(*x).cols();
                let n = idx.len();
                acc(*x, &|s| {
                    for r in 0..out.rows() {
                        for (j, &i) in idx.iter().enumerate() {
                            s[r * src_cols + i] += g[r * n + j];
                        }
                    }
                });
            }
            Op::Select(x, flat) => acc(*x, &|s| {
                for (j, &i) in flat.iter().enumerate() {
                    s[i] += g[j];
                }
            }),
            Op::Sum(x) => acc(*x, &|s| {
                for v in s.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &|s| {
                    for v in s.iter_mut() {
                        *v += g[0] / n;
                    }
                });
            }
            Op::BlockAttention {
                q,
                k,
                v,
                blocks,
                causal,
                softmax,
                scale,
                weights,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.rows();
                let total = tq.cols();
                let (qt, kt, vt) = (tq.transpose(), tk.transpose(), tv.transpose());
                let (qt, kt, vt) = (qt.data(), kt.data(), vt.data());
                let gt = gt().transpose();
                let gt = gt.data();
                let mut dq = vec![0.0; total * d];
                let mut dk = vec![0.0; total * d];
                let mut dv = vec![0.0; total * d];
                let mut start = 0;
                let mut offset = 0;
                for &n in blocks {
                    let a = &weights[offset..offset + n * n];
                    let span = |j: usize| (start + j) * d..(start + j + 1) * d;
                    let mut ds = vec![0.0; n * n];
                    for r in 0..n {
                        for c in 0..n {
                            let w = a[r * n + c];
                            let da = kernels::dot(&vt[span(r)], &gt[span(c)]);
                            ds[r * n + c] = da;
                            if w != 0.0 {
                                let rr = span(r);
                                for (o, &gv) in dv[rr].iter_mut().zip(&gt[span(c)]) {
                                    *o += w * gv;
                                }
                            }
                        }
                    }
                    for c in 0..n {
                        if *softmax {
                            let inner: f64 = (0..n).map(|r| a[r * n + c] * ds[r * n + c]).sum();
                            for r in 0..n {
                                ds[r * n + c] = a[r * n + c] * (ds[r * n + c] - inner);
                            }
                        } else if *causal {
                            for r in c + 1..n {
                                ds[r * n + c] = 0.0;
                            }
                        }
                    }
                    for r in 0..n {
                        for c in 0..n {
                            let w = ds[r * n + c] / scale;
                            if w == 0.0 {
                                continue;
                            }
                            let (rr, cc) = (span(r), span(c));
                            for p in 0..d {
                                dq[rr.start + p] += w * kt[cc.start + p];
                                dk[cc.start + p] += w * qt[rr.start + p];
                            }
                        }
                    }
                    start += n;
                    offset += n * n;
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        let t = Tensor::matrix(total, d, buf)?.transpose();
                        acc(var, &|s| add_into(s, t.data()));
                    }
                }
            }
            Op::SparseMix(x, entries) => {
                let cols = self.value(*x).cols();
                let out_cols = out.cols();
                acc(*x, &|s| {
                    for &(src, dst, w) in entries {
                        for r in 0..out.rows() {
                            s[r * cols + src] += w * g[r * out_cols + dst];
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
