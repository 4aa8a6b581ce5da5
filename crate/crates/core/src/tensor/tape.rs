use super::gemm::gemm;
use super::Tensor;
use crate::activations::ActivationKind;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColMean(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    MaskedLogSumExp {
        x: Var,
        mask: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Activation {
        x: Var,
        kind: ActivationKind,
    },
    Attention {
        qkv: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    AssembleTokens {
        content: Var,
        cls: Var,
        pos: Var,
    },
}

/// Records operations in evaluation order and replays them backwards.
///
/// Inputs of an operation always precede it on the tape, so a single reverse
/// sweep visits every node after all of its consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn is_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, s, &[2])),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        add_into(&mut out, row);
    }
    out
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Gradients are only accumulated into leaves that
    /// require them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value into a fresh constant leaf; nothing flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = is_matrix("matmul", ta)?;
        let (k2, n) = is_matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x * w^T + b` for `x: [m, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, k) = is_matrix("linear", tx)?;
        let (n, k2) = is_matrix("linear", tw)?;
        if k != k2 {
            return Err(Error::dim("linear", tx.shape(), tw.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, tx.data(), false, tw.data(), true, &mut out, false);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [n] {
                return Err(Error::dim("linear", &[n], tb.shape()));
            }
            for row in out.chunks_exact_mut(n) {
                add_into(row, tb.data());
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        if tb.shape() != [c] {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)) {
            add_into(row, tb.data());
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Degenerate("mean of an empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// `[r, c] -> [r]`, summing each row.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = is_matrix("row_sum", t)?;
        let data = if c == 0 {
            vec![0.0; r]
        } else {
            t.data()
                .chunks_exact(c)
                .map(|row| row.iter().sum())
                .collect()
        };
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r], data)?, Op::RowSum(a), rg))
    }

    /// `[r, c] -> [c]`, averaging over rows.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = is_matrix("col_mean", t)?;
        if r == 0 {
            return Err(Error::Degenerate("col_mean over zero rows".into()));
        }
        let data = col_sums(t.data(), c)
            .into_iter()
            .map(|s| s / r as f64)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c], data)?, Op::ColMean(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Numeric(
                "log of a non-positive or non-finite value".into(),
            ));
        }
        let out = t.map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// `max(x, lo)` elementwise; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let out = self.value(a).map(|v| v.max(lo));
        let rg = self.rg(a);
        self.push(out, Op::ClampMin(a, lo), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.all_finite() {
            return Err(Error::Numeric("softmax of non-finite input".into()));
        }
        let c = t.cols();
        let mut data = vec![0.0; t.len()];
        for (x, o) in t.data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            softmax_row(x, o);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.all_finite() {
            return Err(Error::Numeric("log_softmax of non-finite input".into()));
        }
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Row-wise `log sum_j exp(x_ij)` over the entries where `mask` is true.
    pub fn masked_log_sum_exp(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = is_matrix("masked_log_sum_exp", t)?;
        if mask.len() != r * c {
            return Err(Error::dim("masked_log_sum_exp", t.shape(), &[mask.len()]));
        }
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let picked: Vec<f64> = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .collect();
            if picked.is_empty() {
                return Err(Error::Degenerate(format!(
                    "row {i} has no entries in its mask"
                )));
            }
            out.push(log_sum_exp(&picked));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![r], out)?,
            Op::MaskedLogSumExp { x: a, mask },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if d == 0 || tx.shape().is_empty() {
            return Err(Error::dim("layer_norm", tx.shape(), &[0]));
        }
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for i in 0..rows {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut data = t.data().to_vec();
        for (i, row) in data.chunks_exact_mut(d.max(1)).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 1e-12) {
                return Err(Error::Degenerate(format!("row {i} has norm {n:e}")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Result<Var> {
        let t = self.value(x);
        if !t.all_finite() {
            return Err(Error::Numeric(format!(
                "{kind} applied to non-finite input"
            )));
        }
        let out = t.map(|v| kind.eval(v));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Activation { x, kind }, rg))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch * seq, 3 * d]` with the query, key and value blocks
    /// laid side by side; the output is `[batch * seq, d]` with heads
    /// concatenated along the feature axis.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(qkv);
        let (rows, three_d) = is_matrix("attention", t)?;
        if seq == 0 || heads == 0 || rows % seq != 0 || three_d % (3 * heads) != 0 {
            return Err(Error::dim("attention", t.shape(), &[seq, heads]));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let batch = rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = t.data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let q = &src[(b * seq + i) * three_d + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &src[(b * seq + j) * three_d + d + h * dh..][..dh];
                        *s = q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    let p = &mut probs[p_base + i * seq..p_base + (i + 1) * seq];
                    softmax_row(&scores, p);
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let v = &src[(b * seq + j) * three_d + 2 * d + h * dh..][..dh];
                        for (ot, vt) in o.iter_mut().zip(v) {
                            *ot += pj * vt;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(qkv);
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let r = t.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", t.shape(), &[bad]));
        }
        let out = t.gather_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, idx }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != c {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Prepends a class token to every sequence of `content` and adds
    /// positional embeddings.
    ///
    /// `content` is `[batch * (seq - 1), d]`, `cls` is `[d]`, `pos` is
    /// `[seq, d]`; the result is `[batch * seq, d]`.
    pub fn assemble_tokens(&mut self, content: Var, cls: Var, pos: Var) -> Result<Var> {
        let (tc, tk, tp) = (self.value(content), self.value(cls), self.value(pos));
        let (seq, d) = is_matrix("assemble_tokens", tp)?;
        let (rows, d2) = is_matrix("assemble_tokens", tc)?;
        if seq < 2 || d2 != d || tk.shape() != [d] || rows % (seq - 1) != 0 {
            return Err(Error::dim("assemble_tokens", tc.shape(), tp.shape()));
        }
        let batch = rows / (seq - 1);
        let mut out = Vec::with_capacity(batch * seq * d);
        for b in 0..batch {
            for t in 0..seq {
                let src = if t == 0 {
                    tk.data()
                } else {
                    tc.row(b * (seq - 1) + t - 1)
                };
                out.extend(src.iter().zip(tp.row(t)).map(|(x, p)| x + p));
            }
        }
        let rg = self.rg(content) || self.rg(cls) || self.rg(pos);
        Ok(self.push(
            Tensor::new(vec![batch * seq, d], out)?,
            Op::AssembleTokens { content, cls, pos },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Clears gradients left by any
    /// earlier sweep first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                self.nodes[loss.0].value.shape(),
                &[],
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            backprop(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn accumulate(nodes: &mut [Node], v: Var, g: Vec<f64>) {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(acc) => add_into(acc, &g),
        None => n.grad = Some(g),
    }
}

fn backprop(nodes: &mut [Node], op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if wants(nodes, *a) {
                let mut da = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g,
                    false,
                    nodes[b.0].value.data(),
                    true,
                    &mut da,
                    false,
                );
                accumulate(nodes, *a, da);
            }
            if wants(nodes, *b) {
                let mut db = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    nodes[a.0].value.data(),
                    true,
                    g,
                    false,
                    &mut db,
                    false,
                );
                accumulate(nodes, *b, db);
            }
        }
        Op::Linear { x, w, b } => {
            let (m, k) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            let n = nodes[w.0].value.shape()[0];
            if wants(nodes, *x) {
                let mut dx = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g,
                    false,
                    nodes[w.0].value.data(),
                    false,
                    &mut dx,
                    false,
                );
                accumulate(nodes, *x, dx);
            }
            if wants(nodes, *w) {
                let mut dw = vec![0.0; n * k];
                gemm(
                    n,
                    m,
                    k,
                    g,
                    true,
                    nodes[x.0].value.data(),
                    false,
                    &mut dw,
                    false,
                );
                accumulate(nodes, *w, dw);
            }
            if let Some(b) = b {
                if wants(nodes, *b) {
                    accumulate(nodes, *b, col_sums(g, n));
                }
            }
        }
        Op::Transpose(a) => {
            let gt = Tensor::new(out.shape().to_vec(), g.to_vec())
                .and_then(|t| t.transpose())
                .expect("transpose grad");
            accumulate(nodes, *a, gt.into_data());
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, g.to_vec());
            accumulate(nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, g.to_vec());
            if wants(nodes, *b) {
                accumulate(nodes, *b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let d = g
                    .iter()
                    .zip(nodes[b.0].value.data())
                    .map(|(x, y)| x * y)
                    .collect();
                accumulate(nodes, *a, d);
            }
            if wants(nodes, *b) {
                let d = g
                    .iter()
                    .zip(nodes[a.0].value.data())
                    .map(|(x, y)| x * y)
                    .collect();
                accumulate(nodes, *b, d);
            }
        }
        Op::Scale(a, s) => accumulate(nodes, *a, g.iter().map(|v| v * s).collect()),
        Op::AddBias(x, b) => {
            accumulate(nodes, *x, g.to_vec());
            if wants(nodes, *b) {
                let c = out.cols();
                accumulate(nodes, *b, col_sums(g, c));
            }
        }
        Op::Sum(a) => {
            let n = nodes[a.0].value.len();
            accumulate(nodes, *a, vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.len();
            accumulate(nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::RowSum(a) => {
            let c = nodes[a.0].value.cols();
            let d = g
                .iter()
                .flat_map(|&gi| std::iter::repeat_n(gi, c))
                .collect();
            accumulate(nodes, *a, d);
        }
        Op::ColMean(a) => {
            let r = nodes[a.0].value.rows();
            let mut d = Vec::with_capacity(r * g.len());
            for _ in 0..r {
                d.extend(g.iter().map(|v| v / r as f64));
            }
            accumulate(nodes, *a, d);
        }
        Op::Log(a) => {
            let d = g
                .iter()
                .zip(nodes[a.0].value.data())
                .map(|(gi, x)| gi / x)
                .collect();
            accumulate(nodes, *a, d);
        }
        Op::Exp(a) => {
            let d = g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect();
            accumulate(nodes, *a, d);
        }
        Op::ClampMin(a, lo) => {
            let d = g
                .iter()
                .zip(nodes[a.0].value.data())
                .map(|(gi, &x)| if x > *lo { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, *a, d);
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut d = vec![0.0; g.len()];
            for ((y, gr), dr) in out
                .data()
                .chunks_exact(c)
                .zip(g.chunks_exact(c))
                .zip(d.chunks_exact_mut(c))
            {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dr[j] = y[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, *a, d);
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut d = vec![0.0; g.len()];
            for ((y, gr), dr) in out
                .data()
                .chunks_exact(c)
                .zip(g.chunks_exact(c))
                .zip(d.chunks_exact_mut(c))
            {
                let gs: f64 = gr.iter().sum();
                for j in 0..c {
                    dr[j] = gr[j] - y[j].exp() * gs;
                }
            }
            accumulate(nodes, *a, d);
        }
        Op::MaskedLogSumExp { x, mask } => {
            let t = &nodes[x.0].value;
            let c = t.cols();
            let mut d = vec![0.0; t.len()];
            for i in 0..t.rows() {
                for j in 0..c {
                    if mask[i * c + j] {
                        d[i * c + j] = g[i] * (t.data()[i * c + j] - out.data()[i]).exp();
                    }
                }
            }
            accumulate(nodes, *x, d);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = out.cols();
            if wants(nodes, *gamma) {
                let mut dg = vec![0.0; d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                }
                accumulate(nodes, *gamma, dg);
            }
            if wants(nodes, *beta) {
                accumulate(nodes, *beta, col_sums(g, d));
            }
            if wants(nodes, *x) {
                let gam = nodes[gamma.0].value.data();
                let mut dx = vec![0.0; g.len()];
                for (i, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let m1 = dh.iter().sum::<f64>() / d as f64;
                    let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = rstd[i] * (dh[j] - m1 - hr[j] * m2);
                    }
                }
                accumulate(nodes, *x, dx);
            }
        }
        Op::L2Normalize { x, norms } => {
            let d = out.cols();
            let mut dx = vec![0.0; g.len()];
            for (i, ((y, gr), dr)) in out
                .data()
                .chunks_exact(d)
                .zip(g.chunks_exact(d))
                .zip(dx.chunks_exact_mut(d))
                .enumerate()
            {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dr[j] = (gr[j] - y[j] * dot) / norms[i];
                }
            }
            accumulate(nodes, *x, dx);
        }
        Op::Activation { x, kind } => {
            let d = g
                .iter()
                .zip(nodes[x.0].value.data())
                .map(|(gi, &v)| gi * kind.derivative(v))
                .collect();
            accumulate(nodes, *x, d);
        }
        Op::Attention {
            qkv,
            seq,
            heads,
            probs,
        } => {
            let src = nodes[qkv.0].value.data();
            let three_d = nodes[qkv.0].value.cols();
            let d = three_d / 3;
            let (seq, heads) = (*seq, *heads);
            let dh = d / heads;
            let batch = out.rows() / seq;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dqkv = vec![0.0; src.len()];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let p_base = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                        let p = &probs[p_base + i * seq..p_base + (i + 1) * seq];
                        for j in 0..seq {
                            let vrow = (b * seq + j) * three_d + 2 * d + h * dh;
                            dp[j] = gi
                                .iter()
                                .zip(&src[vrow..vrow + dh])
                                .map(|(a, b)| a * b)
                                .sum();
                            for t in 0..dh {
                                dqkv[vrow + t] += p[j] * gi[t];
                            }
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        let qrow = (b * seq + i) * three_d + h * dh;
                        for j in 0..seq {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            let krow = (b * seq + j) * three_d + d + h * dh;
                            for t in 0..dh {
                                dqkv[qrow + t] += ds * src[krow + t];
                                dqkv[krow + t] += ds * src[qrow + t];
                            }
                        }
                    }
                }
            }
            accumulate(nodes, *qkv, dqkv);
        }
        Op::GatherRows { x, idx } => {
            let t = &nodes[x.0].value;
            let c = t.cols();
            let mut dx = vec![0.0; t.len()];
            for (k, &i) in idx.iter().enumerate() {
                add_into(&mut dx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
            }
            accumulate(nodes, *x, dx);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.len();
                accumulate(nodes, p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::AssembleTokens { content, cls, pos } => {
            let (seq, d) = (nodes[pos.0].value.rows(), nodes[pos.0].value.cols());
            let batch = out.rows() / seq;
            if wants(nodes, *content) {
                let mut dc = Vec::with_capacity(batch * (seq - 1) * d);
                for b in 0..batch {
                    dc.extend_from_slice(&g[(b * seq + 1) * d..(b + 1) * seq * d]);
                }
                accumulate(nodes, *content, dc);
            }
            if wants(nodes, *cls) {
                let mut dk = vec![0.0; d];
                for b in 0..batch {
                    add_into(&mut dk, &g[b * seq * d..(b * seq + 1) * d]);
                }
                accumulate(nodes, *cls, dk);
            }
            if wants(nodes, *pos) {
                let mut dp = vec![0.0; seq * d];
                for b in 0..batch {
                    add_into(&mut dp, &g[b * seq * d..(b + 1) * seq * d]);
                }
                accumulate(nodes, *pos, dp);
            }
        }
    }
}
