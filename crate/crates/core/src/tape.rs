//! Reverse-mode differentiation over coarse tensor operations.
//!
//! A [`Tape`] records every operation applied to its variables. Named
//! parameters are leaves that receive gradients; constants are leaves that
//! do not. [`Tape::backward`] walks the record in reverse and returns one
//! gradient per registered parameter (zeros for parameters the loss never
//! touched).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, ensure_finite, log_sum_exp, mm, mm_nt, mm_tn, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous rows `[start, start + len)` forming one causal sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulConst(Var, Tensor),
    Relu(Var),
    GatherRows {
        src: Var,
        index: Vec<Option<usize>>,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        // per segment, per head: len×len row-major (upper triangle zero)
        probs: Vec<Vec<f64>>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    RowDot(Var, Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    InfoNce {
        positive: Var,
        sims: Var,
        negatives: Vec<Vec<usize>>,
        temperature: f64,
        weights: Vec<Vec<f64>>,
    },
    KlFromReference {
        logits: Var,
        reference: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Per-parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.0.insert(name, grad);
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    /// Registers a named, gradient-tracked leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        ensure_finite(&value, name)?;
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Registers an untracked leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        ensure_finite(&value, name)?;
        let tracked = inputs.iter().any(|&v| self.nodes[v.0].tracked);
        Ok(self.push(value, op, tracked))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push_checked("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt")?;
        let (n, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push_checked("matmul_nt", Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push_checked("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push_checked("scale", out, Op::Scale(a, s), &[a])
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::shape("add_bias", format!("bias {:?} for {n} columns", self.value(bias).shape())));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bi) in row.iter_mut().zip(&b) {
                *o += bi;
            }
        }
        self.push_checked("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Element-wise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", self.value(x).shape(), c.shape())));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::from_parts(c.shape().to_vec(), data);
        self.push_checked("mul_const", out, Op::MulConst(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_checked("relu", out, Op::Relu(x), &[x])
    }

    /// Row gather; `None` yields a zero row that passes no gradient.
    pub fn gather_rows(&mut self, src: Var, index: Vec<Option<usize>>) -> Result<Var> {
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let s = self.value(src);
        let (r, c) = (s.rows(), s.cols());
        let mut out = vec![0.0; index.len() * c];
        for (i, idx) in index.iter().enumerate() {
            if let Some(j) = *idx {
                if j >= r {
                    return Err(Error::shape("gather_rows", format!("row {j} out of {r}")));
                }
                out[i * c..(i + 1) * c].copy_from_slice(s.row(j));
            }
        }
        let value = Tensor::from_parts(vec![index.len(), c], out);
        self.push_checked("gather_rows", value, Op::GatherRows { src, index }, &[src])
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.value(src);
        if start >= end || end > s.rows() {
            return Err(Error::shape("slice_rows", format!("[{start},{end}) of {} rows", s.rows())));
        }
        let c = s.cols();
        let value = Tensor::from_parts(vec![end - start, c], s.data()[start * c..end * c].to_vec());
        self.push_checked("slice_rows", value, Op::SliceRows { src, start }, &[src])
    }

    /// Row-wise layer normalization followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        if self.value(gain).len() != n || self.value(shift).len() != n {
            return Err(Error::shape("layer_norm", "gain/shift width"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(shift).data();
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                normalized[i * n + j] = xh;
                out[i * n + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::from_parts(vec![m, n], out);
        let op = Op::LayerNorm {
            x,
            gain,
            shift,
            normalized,
            inv_std,
        };
        self.push_checked("layer_norm", value, op, &[x, gain, shift])
    }

    /// Scaled dot-product attention restricted to earlier-or-equal rows of
    /// the same segment, computed independently per head.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize) -> Result<Var> {
        let (m, d) = self.dims(q, "causal_attention")?;
        if self.dims(k, "causal_attention")? != (m, d) || self.dims(v, "causal_attention")? != (m, d) {
            return Err(Error::shape("causal_attention", "q/k/v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("causal_attention", format!("{d} not divisible by {heads} heads")));
        }
        if segments.iter().any(|s| s.len == 0 || s.start + s.len > m) {
            return Err(Error::shape("causal_attention", "segment out of range"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; m * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in &segments {
            let l = seg.len;
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; l * l];
                for t in 0..l {
                    let qt = &qs[(seg.start + t) * d + off..(seg.start + t) * d + off + dh];
                    let row = &mut p[t * l..t * l + t + 1];
                    for (s, slot) in row.iter_mut().enumerate() {
                        let ks_row = &ks[(seg.start + s) * d + off..(seg.start + s) * d + off + dh];
                        *slot = dot(qt, ks_row) * scale;
                    }
                    softmax_in_place(row);
                    let o = &mut out[(seg.start + t) * d + off..(seg.start + t) * d + off + dh];
                    for (s, &w) in row.iter().enumerate() {
                        axpy(w, &vs[(seg.start + s) * d + off..(seg.start + s) * d + off + dh], o);
                    }
                }
                probs.push(p);
            }
        }
        let value = Tensor::from_parts(vec![m, d], out);
        let op = Op::CausalAttention {
            q,
            k,
            v,
            segments,
            heads,
            probs,
        };
        self.push_checked("causal_attention", value, op, &[q, k, v])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x, "softmax_rows")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push_checked("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`; `targets` are column indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, n) = self.dims(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::shape("cross_entropy", format!("{} targets for {b} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::TargetOutOfRange {
                target: t + 1,
                n_items: n,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(n).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[targets[i]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push_checked("cross_entropy", value, op, &[logits])
    }

    /// Per-row dot product of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (m, _) = self.dims(a, "row_dot")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = (0..m).map(|i| dot(x.row(i), y.row(i))).collect();
        self.push_checked("row_dot", Tensor::from_parts(vec![m, 1], data), Op::RowDot(a, b), &[a, b])
    }

    /// Scales every row to unit L2 norm (norms floored at 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "normalize_rows")?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(m);
        for row in out.data_mut().chunks_mut(n) {
            let norm = dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push_checked("normalize_rows", out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Mean over anchors of the contrastive log-ratio against selected negatives.
    ///
    /// `positive` is `B×1` (anchor/positive similarity), `sims` is `B×N` and
    /// `negatives[i]` lists the columns of `sims` used as negatives for anchor `i`.
    pub fn info_nce(&mut self, positive: Var, sims: Var, negatives: Vec<Vec<usize>>, temperature: f64) -> Result<Var> {
        let (b, one) = self.dims(positive, "info_nce")?;
        let (b2, n) = self.dims(sims, "info_nce")?;
        if one != 1 || b != b2 || negatives.len() != b {
            return Err(Error::shape("info_nce", "positive/sims/negatives disagree"));
        }
        if negatives.iter().flatten().any(|&j| j >= n) {
            return Err(Error::shape("info_nce", "negative index out of range"));
        }
        if !(temperature > 0.0) {
            return Err(Error::Invalid("temperature must be positive".into()));
        }
        let (pos, s) = (self.value(positive).data(), self.value(sims));
        let mut total = 0.0;
        let mut weights = Vec::with_capacity(b);
        for i in 0..b {
            let mut z = Vec::with_capacity(negatives[i].len() + 1);
            z.push(pos[i] / temperature);
            z.extend(negatives[i].iter().map(|&j| s.get(i, j) / temperature));
            total += log_sum_exp(&z) - z[0];
            softmax_in_place(&mut z);
            weights.push(z);
        }
        let value = Tensor::scalar(total / b as f64);
        let op = Op::InfoNce {
            positive,
            sims,
            negatives,
            temperature,
            weights,
        };
        self.push_checked("info_nce", value, op, &[positive, sims])
    }

    /// Mean over rows of KL(reference ‖ softmax(logits)); `reference` holds
    /// row-stochastic target distributions and receives no gradient.
    pub fn kl_from_reference(&mut self, logits: Var, reference: &Tensor) -> Result<Var> {
        let (b, n) = self.dims(logits, "kl_from_reference")?;
        if reference.shape() != [b, n] {
            return Err(Error::shape("kl_from_reference", "reference shape"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(n).enumerate() {
            let lse = log_sum_exp(row);
            let p = reference.row(i);
            for (j, v) in row.iter_mut().enumerate() {
                let log_q = *v - lse;
                if p[j] > 0.0 {
                    total += p[j] * (p[j].ln() - log_q);
                }
                *v = log_q.exp();
            }
        }
        let value = Tensor::scalar(total / b as f64);
        let op = Op::KlFromReference {
            logits,
            reference: reference.data().to_vec(),
            probs,
        };
        self.push_checked("kl_from_reference", value, op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_checked("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_checked("mean", value, Op::Mean(x), &[x])
    }

    /// Gradients of the scalar `loss` with respect to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        ensure_finite(lv, "loss")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (name, var) in &self.params {
            let g = grads[..]
                .get(var.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.value(*var).shape()));
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    mm_nt(gd, bv.data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    mm_tn(av.data(), gd, m, k, n, &mut db);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    mm(gd, bv.data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    mm_tn(gd, av.data(), m, n, k, &mut db);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n, k], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        axpy(1.0, row, &mut db);
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::from_parts(shape, db));
                }
            }
            Op::MulConst(x, c) => {
                let d = gd.iter().zip(c.data()).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::GatherRows { src, index } => {
                let sv = self.value(*src);
                let c = sv.cols();
                let mut d = Tensor::zeros(sv.shape());
                let dd = d.data_mut();
                for (i, idx) in index.iter().enumerate() {
                    if let Some(j) = *idx {
                        axpy(1.0, &gd[i * c..(i + 1) * c], &mut dd[j * c..(j + 1) * c]);
                    }
                }
                self.accumulate(grads, *src, d);
            }
            Op::SliceRows { src, start } => {
                let sv = self.value(*src);
                let c = sv.cols();
                let mut d = Tensor::zeros(sv.shape());
                d.data_mut()[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *src, d);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let n = g.cols();
                let gv = self.value(*gain).data();
                if self.wants(*shift) || self.wants(*gain) {
                    let mut dg = vec![0.0; n];
                    let mut ds = vec![0.0; n];
                    for (row, xh) in gd.chunks(n).zip(normalized.chunks(n)) {
                        for j in 0..n {
                            dg[j] += row[j] * xh[j];
                            ds[j] += row[j];
                        }
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::from_parts(shape.clone(), dg));
                    self.accumulate(grads, *shift, Tensor::from_parts(shape, ds));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let nf = n as f64;
                    for (i, ((row, xh), out)) in gd.chunks(n).zip(normalized.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let dxh = row[j] * gv[j];
                            sum_d += dxh;
                            sum_dx += dxh * xh[j];
                        }
                        let inv = inv_std[i];
                        for j in 0..n {
                            let dxh = row[j] * gv[j];
                            out[j] = inv / nf * (nf * dxh - sum_d - xh[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let d = g.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; gd.len()];
                let mut dk = vec![0.0; gd.len()];
                let mut dv = vec![0.0; gd.len()];
                let mut dp = Vec::new();
                for (si, seg) in segments.iter().enumerate() {
                    let l = seg.len;
                    for h in 0..*heads {
                        let p = &probs[si * heads + h];
                        let off = h * dh;
                        let at = |t: usize| (seg.start + t) * d + off;
                        for t in 0..l {
                            let go = &gd[at(t)..at(t) + dh];
                            dp.clear();
                            let mut inner = 0.0;
                            for s in 0..=t {
                                let w = p[t * l + s];
                                axpy(w, go, &mut dv[at(s)..at(s) + dh]);
                                let dps = dot(go, &vv[at(s)..at(s) + dh]);
                                inner += w * dps;
                                dp.push(dps);
                            }
                            for s in 0..=t {
                                let ds = p[t * l + s] * (dp[s] - inner) * scale;
                                if ds != 0.0 {
                                    axpy(ds, &kv[at(s)..at(s) + dh], &mut dq[at(t)..at(t) + dh]);
                                    axpy(ds, &qv[at(t)..at(t) + dh], &mut dk[at(s)..at(s) + dh]);
                                }
                            }
                        }
                    }
                }
                let shape = g.shape().to_vec();
                self.accumulate(grads, *q, Tensor::from_parts(shape.clone(), dq));
                self.accumulate(grads, *k, Tensor::from_parts(shape.clone(), dk));
                self.accumulate(grads, *v, Tensor::from_parts(shape, dv));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![0.0; gd.len()];
                for ((gr, yr), out) in gd.chunks(n).zip(y.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let inner = dot(gr, yr);
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let (b, n) = (lv.rows(), lv.cols());
                let scale = gd[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * n + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(vec![b, n], d));
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.cols();
                if self.wants(*a) {
                    let mut d = vec![0.0; av.len()];
                    for (i, out) in d.chunks_mut(n).enumerate() {
                        axpy(gd[i], bv.row(i), out);
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; bv.len()];
                    for (i, out) in d.chunks_mut(n).enumerate() {
                        axpy(gd[i], av.row(i), out);
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), d));
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![0.0; gd.len()];
                for (i, ((gr, yr), out)) in gd.chunks(n).zip(y.data().chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    let inner = dot(gr, yr);
                    for j in 0..n {
                        out[j] = (gr[j] - yr[j] * inner) / norms[i];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::InfoNce {
                positive,
                sims,
                negatives,
                temperature,
                weights,
            } => {
                let b = negatives.len();
                let scale = gd[0] / (b as f64 * temperature);
                let mut dpos = vec![0.0; b];
                let sv = self.value(*sims);
                let mut ds = vec![0.0; sv.len()];
                let n = sv.cols();
                for i in 0..b {
                    let w = &weights[i];
                    dpos[i] = (w[0] - 1.0) * scale;
                    for (slot, &j) in negatives[i].iter().enumerate() {
                        ds[i * n + j] += w[slot + 1] * scale;
                    }
                }
                self.accumulate(grads, *positive, Tensor::from_parts(vec![b, 1], dpos));
                self.accumulate(grads, *sims, Tensor::from_parts(sv.shape().to_vec(), ds));
            }
            Op::KlFromReference {
                logits,
                reference,
                probs,
            } => {
                let lv = self.value(*logits);
                let scale = gd[0] / lv.rows() as f64;
                let d = probs.iter().zip(reference).map(|(q, p)| (q - p) * scale).collect();
                self.accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let shape = xv.shape().to_vec();
                let n = xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(&shape, gd[0] / n));
            }
        }
    }
}
