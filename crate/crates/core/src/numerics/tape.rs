//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! record once, from the loss towards the leaves, and skips any branch that
//! cannot reach a tensor with `requires_grad`.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::{axpy, dot, gemm, gemm_nt, gemm_tn, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Additive mask value for excluded attention / softmax entries.
pub const MASK_VALUE: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    MeanRows(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
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

/// Record of differentiable operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: HashMap<(u64, ParamId), Var>,
    consumed: bool,
    visited: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf nodes processed by the last `backward`.
    pub fn ops_visited(&self) -> usize {
        self.visited
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        self.consumed = false;
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Constant input; never differentiated.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Leaf bound to a store entry. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id));
        self.bindings.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.shape(v), self.value(v).to_vec()).unwrap()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn ng2(&self, a: Var, b: Var) -> bool {
        self.node(a).needs_grad || self.node(b).needs_grad
    }

    /// `a[..., k] · b[k, n]`; leading dims of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if nb.shape.len() != 2 || na.cols() != nb.shape[0] {
            return Err(Error::dims("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.rows(), na.cols(), nb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(&na.value, &nb.value, &mut out, m, k, n);
        let mut shape = na.shape.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng2(a, b);
        Ok(self.push(shape, out, ng, Op::MatMul(a, b)))
    }

    /// `a[..., k] · b[n, k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if nb.shape.len() != 2 || na.cols() != nb.shape[1] {
            return Err(Error::dims("matmul_nt", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.rows(), na.cols(), nb.shape[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(&na.value, &nb.value, &mut out, m, k, n);
        let mut shape = na.shape.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng2(a, b);
        Ok(self.push(shape, out, ng, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::dims("add", &na.shape, &nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
        let shape = na.shape.clone();
        let ng = self.ng2(a, b);
        Ok(self.push(shape, out, ng, Op::Add(a, b)))
    }

    /// Adds a length-`n` row to every row of `a[..., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (na, nr) = (self.node(a), self.node(row));
        let n = na.cols();
        if nr.value.len() != n {
            return Err(Error::dims("add_row", &na.shape, &nr.shape));
        }
        let mut out = na.value.clone();
        for chunk in out.chunks_mut(n) {
            chunk.iter_mut().zip(&nr.value).for_each(|(o, r)| *o += r);
        }
        let shape = na.shape.clone();
        let ng = self.ng2(a, row);
        Ok(self.push(shape, out, ng, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::dims("mul", &na.shape, &nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).collect();
        let shape = na.shape.clone();
        let ng = self.ng2(a, b);
        Ok(self.push(shape, out, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let na = self.node(a);
        let out = na.value.iter().map(|x| x * s).collect();
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        self.push(shape, out, ng, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let out = na.value.iter().map(|&x| x.max(0.0)).collect();
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        self.push(shape, out, ng, Op::Relu(a))
    }

    /// Normalizes each row over its last dimension, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let nx = self.node(x);
        let n = nx.cols();
        if self.node(gain).value.len() != n || self.node(bias).value.len() != n {
            return Err(Error::dims("layer_norm", &nx.shape, self.shape(gain)));
        }
        let g = &self.node(gain).value;
        let b = &self.node(bias).value;
        let rows = nx.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let xr = &nx.value[r * n..(r + 1) * n];
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (xr[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = nx.shape.clone();
        let ng = nx.needs_grad || self.ng2(gain, bias);
        Ok(self.push(
            shape,
            out,
            ng,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of a 2-D table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let nt = self.node(table);
        if nt.shape.len() != 2 {
            return Err(Error::dims("embedding", &nt.shape, &[ids.len()]));
        }
        let (vocab, d) = (nt.shape[0], nt.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, vocab });
            }
            out.extend_from_slice(&nt.value[id * d..(id + 1) * d]);
        }
        let ng = nt.needs_grad;
        Ok(self.push(
            vec![ids.len(), d],
            out,
            ng,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise softmax. With `causal`, the trailing two dims are read as a
    /// square score matrix and entries above the diagonal receive `MASK_VALUE`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var> {
        let na = self.node(a);
        let n = na.cols();
        if causal && (na.shape.len() < 2 || na.shape[na.shape.len() - 2] != n) {
            return Err(Error::dims("causal softmax", &na.shape, &[n, n]));
        }
        let mut out = na.value.clone();
        for (r, row) in out.chunks_mut(n).enumerate() {
            if causal {
                let i = r % n;
                row.iter_mut().skip(i + 1).for_each(|x| *x += MASK_VALUE);
            }
            softmax_in_place(row);
        }
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        Ok(self.push(shape, out, ng, Op::Softmax(a)))
    }

    /// Multi-head causal self-attention over `batch` sequences of length `seq`.
    ///
    /// `q`, `k`, `v` hold `batch·seq` rows of width `d`; heads split `d` evenly.
    /// `key_mask[b·seq + j] == false` excludes key `j` of sequence `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (nq, nk, nv) = (self.node(q), self.node(k), self.node(v));
        let d = nq.cols();
        if nk.shape != nq.shape || nv.shape != nq.shape {
            return Err(Error::dims("attention", &nq.shape, &nk.shape));
        }
        if nq.rows() != batch * seq || key_mask.len() != batch * seq || d % heads != 0 {
            return Err(Error::dims("attention", &nq.shape, &[batch, seq, heads]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &nq.value[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let kj = &nk.value[(b * seq + j) * d + off..][..dh];
                        let mut s = dot(qi, kj) * scale;
                        if !key_mask[b * seq + j] {
                            s += MASK_VALUE;
                        }
                        scores[j] = s;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    prow[..=i].copy_from_slice(&scores[..=i]);
                    let orow = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let vj = &nv.value[(b * seq + j) * d + off..][..dh];
                        axpy(prow[j], vj, orow);
                    }
                }
            }
        }
        let shape = nq.shape.clone();
        let ng = nq.needs_grad || nk.needs_grad || nv.needs_grad;
        Ok(self.push(
            shape,
            out,
            ng,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Inverted dropout; `p == 0` returns the input unchanged.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let na = self.node(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..na.value.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = na.value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let (shape, ng) = (na.shape.clone(), na.needs_grad);
        self.push(shape, out, ng, Op::Dropout(a, mask))
    }

    /// Mean over rows, producing a `[1, n]` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let n = na.cols();
        let rows = na.rows();
        let mut out = vec![0.0; n];
        for row in na.value.chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let ng = na.needs_grad;
        self.push(vec![1, n], out, ng, Op::MeanRows(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let na = self.node(a);
        if shape.iter().product::<usize>() != na.value.len() {
            return Err(Error::dims("reshape", &na.shape, shape));
        }
        let (value, ng) = (na.value.clone(), na.needs_grad);
        Ok(self.push(shape.to_vec(), value, ng, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let s = na.value.iter().sum();
        let ng = na.needs_grad;
        self.push(vec![1], vec![s], ng, Op::Sum(a))
    }

    /// Mean token cross-entropy over positions whose mask is true.
    ///
    /// Masked positions contribute neither to the value nor to the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let nl = self.node(logits);
        let vocab = nl.cols();
        let rows = nl.rows();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dims(
                "cross_entropy",
                &nl.shape,
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::TargetOutOfRange { target: t, vocab });
            }
            let row = &nl.value[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            for (p, x) in prow.iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let ng = nl.needs_grad;
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Propagates d(loss)/d(node) to every node that can reach a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::NonScalarLoss(self.node(loss).shape.clone()));
        }
        self.consumed = true;
        self.visited = 0;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.visited += 1;
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        // shape, not value: the value may be temporarily moved out
        let n = self.nodes[v.0].shape.iter().product();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // The op is moved out so the node's inputs can be borrowed alongside
        // their gradient buffers; it is restored before returning.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    gemm_nt(g, &bv, self.acc(*a).unwrap(), m, n, k);
                    self.nodes[b.0].value = bv;
                }
                if self.nodes[b.0].needs_grad {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    gemm_tn(&av, g, self.acc(*b).unwrap(), m, k, n);
                    self.nodes[a.0].value = av;
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                let n = self.nodes[b.0].shape[0];
                if self.nodes[a.0].needs_grad {
                    // dA = g[m×n] · B[n×k]
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    gemm(g, &bv, self.acc(*a).unwrap(), m, n, k);
                    self.nodes[b.0].value = bv;
                }
                if self.nodes[b.0].needs_grad {
                    // dB = gᵀ[n×m] · A[m×k]
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    gemm_tn(g, &av, self.acc(*b).unwrap(), m, n, k);
                    self.nodes[a.0].value = av;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.acc(v) {
                        axpy(1.0, g, buf);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(buf) = self.acc(*a) {
                    axpy(1.0, g, buf);
                }
                if let Some(buf) = self.acc(*row) {
                    let n = buf.len();
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, buf);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    let buf = self.acc(*a).unwrap();
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(&bv) {
                        *o += gi * y;
                    }
                    self.nodes[b.0].value = bv;
                }
                if self.nodes[b.0].needs_grad {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    let buf = self.acc(*b).unwrap();
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(&av) {
                        *o += gi * x;
                    }
                    self.nodes[a.0].value = av;
                }
            }
            Op::Scale(a, s) => {
                if let Some(buf) = self.acc(*a) {
                    axpy(*s, g, buf);
                }
            }
            Op::Relu(a) => {
                let out = std::mem::take(&mut self.nodes[i].value);
                if let Some(buf) = self.acc(*a) {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(&out) {
                        if *y > 0.0 {
                            *o += gi;
                        }
                    }
                }
                self.nodes[i].value = out;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = xhat.len() / rstd.len();
                if let Some(buf) = self.acc(*bias) {
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, buf);
                    }
                }
                if let Some(buf) = self.acc(*gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            buf[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let gv = self.nodes[gain.0].value.clone();
                    let buf = self.acc(*x).unwrap();
                    let mut dxhat = vec![0.0; n];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dot(&dxhat, hr) / n as f64;
                        let out = &mut buf[r * n..(r + 1) * n];
                        for c in 0..n {
                            out[c] += rs * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(buf) = self.acc(*table) {
                    let d = g.len() / ids.len();
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut buf[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::Softmax(a) => {
                let p = std::mem::take(&mut self.nodes[i].value);
                let n = self.nodes[i].cols();
                if let Some(buf) = self.acc(*a) {
                    for ((pr, gr), out) in p.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                        let s = dot(pr, gr);
                        for c in 0..n {
                            out[c] += pr[c] * (gr[c] - s);
                        }
                    }
                }
                self.nodes[i].value = p;
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, g),
            Op::Dropout(a, mask) => {
                if let Some(buf) = self.acc(*a) {
                    for ((o, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::MeanRows(a) => {
                let rows = self.nodes[a.0].rows();
                if let Some(buf) = self.acc(*a) {
                    let n = g.len();
                    let inv = 1.0 / rows as f64;
                    for chunk in buf.chunks_mut(n) {
                        axpy(inv, g, chunk);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(buf) = self.acc(*a) {
                    axpy(1.0, g, buf);
                }
            }
            Op::Sum(a) => {
                if let Some(buf) = self.acc(*a) {
                    buf.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.nodes[logits.0].cols();
                let w = g[0] / *count as f64;
                if let Some(buf) = self.acc(*logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let out = &mut buf[r * vocab..(r + 1) * vocab];
                        axpy(w, &probs[r * vocab..(r + 1) * vocab], out);
                        out[t] -= w;
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
    ) {
        let d = self.nodes[q.0].cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = batch * seq * d;
        let (want_q, want_k, want_v) = (
            self.nodes[q.0].needs_grad,
            self.nodes[k.0].needs_grad,
            self.nodes[v.0].needs_grad,
        );
        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let gi = &g[(b * seq + i) * d + off..][..dh];
                    let mut s = 0.0;
                    for j in 0..=i {
                        let vj = &vv[(b * seq + j) * d + off..][..dh];
                        dp[j] = dot(gi, vj);
                        s += prow[j] * dp[j];
                        if want_v {
                            axpy(prow[j], gi, &mut dv[(b * seq + j) * d + off..][..dh]);
                        }
                    }
                    let qi = &qv[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        if want_q {
                            let kj = &kv[(b * seq + j) * d + off..][..dh];
                            axpy(ds, kj, &mut dq[(b * seq + i) * d + off..][..dh]);
                        }
                        if want_k {
                            axpy(ds, qi, &mut dk[(b * seq + j) * d + off..][..dh]);
                        }
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = self.acc(var) {
                axpy(1.0, &grad, buf);
            }
        }
    }

    /// Adds the gradients of every bound parameter into `store`, skipping
    /// frozen tensors. Returns the number of tensors that received a gradient.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<usize> {
        let mut written = 0;
        for (&(uid, id), &var) in &self.bindings {
            if uid != store.uid() || !store.get(id).requires_grad() {
                continue;
            }
            if let Some(g) = self.grad(var) {
                store.get_mut(id).accumulate_grad(g)?;
                written += 1;
            }
        }
        Ok(written)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
