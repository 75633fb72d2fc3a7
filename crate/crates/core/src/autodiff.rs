//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly: values are computed when an
//! op is added, and [`Graph::backward`] walks the tape in reverse. Leaves are
//! either trainable (`param`) or constants; constants and everything derived
//! only from constants never receive a gradient, which is how stop-gradient
//! is expressed.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{gemm_into, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// One attention neighbourhood: every query attends over `keys`, optionally
/// restricted by `mask` (row-major `queries x keys`, `true` = allowed) and
/// biased by `bias[head][bias_index[q * keys + k]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
    pub mask: Option<Vec<bool>>,
    pub bias_index: Option<Vec<usize>>,
}

impl AttnGroup {
    pub fn dense(queries: Vec<usize>, keys: Vec<usize>) -> Self {
        Self { queries, keys, mask: None, bias_index: None }
    }

    #[inline]
    fn allowed(&self, qi: usize, kj: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[qi * self.keys.len() + kj])
    }
}

/// Validated set of attention groups over a sequence of `n_tokens` rows.
///
/// Each token is a query in at most one group. Rows that are never queried
/// produce zeros.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPlan {
    n_tokens: usize,
    groups: Vec<AttnGroup>,
    bias_len: Option<usize>,
}

impl AttentionPlan {
    pub fn new(n_tokens: usize, groups: Vec<AttnGroup>, bias_len: Option<usize>) -> Result<Self> {
        let mut seen = vec![false; n_tokens];
        for (gi, g) in groups.iter().enumerate() {
            let (nq, nk) = (g.queries.len(), g.keys.len());
            if nk == 0 && nq > 0 {
                bail!(Attention, "group {gi} has queries but no keys");
            }
            for &i in g.queries.iter().chain(&g.keys) {
                if i >= n_tokens {
                    bail!(Index, "group {gi} references token {i} of {n_tokens}");
                }
            }
            for &q in &g.queries {
                if core::mem::replace(&mut seen[q], true) {
                    bail!(Attention, "token {q} is a query in more than one group");
                }
            }
            if let Some(mask) = &g.mask {
                if mask.len() != nq * nk {
                    bail!(Shape, "group {gi} mask has {} entries, expected {}", mask.len(), nq * nk);
                }
                for qi in 0..nq {
                    if !mask[qi * nk..(qi + 1) * nk].iter().any(|&m| m) {
                        bail!(Attention, "group {gi} query row {qi} is fully masked");
                    }
                }
            }
            match (&g.bias_index, bias_len) {
                (Some(idx), Some(len)) => {
                    if idx.len() != nq * nk {
                        bail!(Shape, "group {gi} bias index has {} entries, expected {}", idx.len(), nq * nk);
                    }
                    if let Some(bad) = idx.iter().find(|&&i| i >= len) {
                        bail!(Index, "group {gi} bias index {bad} outside table of {len}");
                    }
                }
                (None, None) => {}
                (Some(_), None) => bail!(Attention, "group {gi} indexes a bias table the plan does not have"),
                (None, Some(_)) => bail!(Attention, "group {gi} lacks a bias index"),
            }
        }
        Ok(Self { n_tokens, groups, bias_len })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn groups(&self) -> &[AttnGroup] {
        &self.groups
    }

    pub fn bias_len(&self) -> Option<usize> {
        self.bias_len
    }

    fn probs_len(&self, heads: usize) -> usize {
        self.groups.iter().map(|g| heads * g.queries.len() * g.keys.len()).sum()
    }
}

/// Multi-head scaled dot-product attention following `plan`.
///
/// `q`, `k`, `v` are `(n_tokens, dim)`; heads split the columns evenly.
/// `bias` (when the plan has a table) is `(heads, bias_len)`. Returns the
/// concatenated head outputs and the attention probabilities, stored per
/// group, then head, then query row (masked entries are zero).
pub fn attention_forward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    plan: &AttentionPlan,
    heads: usize,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (n, dim) = q.shape();
    if k.shape() != (n, dim) || v.shape() != (n, dim) {
        bail!(Shape, "q/k/v shapes differ: {:?} {:?} {:?}", q.shape(), k.shape(), v.shape());
    }
    if n != plan.n_tokens {
        bail!(Shape, "plan covers {} tokens, got {n}", plan.n_tokens);
    }
    if heads == 0 || dim % heads != 0 {
        bail!(Config, "{heads} heads do not divide width {dim}");
    }
    match (bias, plan.bias_len) {
        (Some(b), Some(len)) if b.shape() == (heads, len) => {}
        (None, None) => {}
        (b, len) => bail!(
            Shape,
            "bias table {:?} does not match plan ({heads} heads, {len:?} entries)",
            b.map(|t| t.shape())
        ),
    }
    let dh = dim / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut out = Tensor::zeros(n, dim);
    let mut probs = vec![F::zero(); plan.probs_len(heads)];
    let mut offset = 0;
    let mut logits = Vec::new();
    for g in &plan.groups {
        let (nq, nk) = (g.queries.len(), g.keys.len());
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (qi, &qt) in g.queries.iter().enumerate() {
                let qrow = &q.row(qt)[cols.clone()];
                logits.clear();
                let mut max = F::neg_infinity();
                for (kj, &kt) in g.keys.iter().enumerate() {
                    if !g.allowed(qi, kj) {
                        logits.push(F::neg_infinity());
                        continue;
                    }
                    let krow = &k.row(kt)[cols.clone()];
                    let mut s = dot(qrow, krow) * scale;
                    if let (Some(b), Some(idx)) = (bias, &g.bias_index) {
                        s += b.get(h, idx[qi * nk + kj]);
                    }
                    max = max.max(s);
                    logits.push(s);
                }
                let p = &mut probs[offset + (h * nq + qi) * nk..offset + (h * nq + qi + 1) * nk];
                let mut total = F::zero();
                for (pj, &s) in p.iter_mut().zip(&logits) {
                    *pj = if s == F::neg_infinity() { F::zero() } else { (s - max).exp() };
                    total += *pj;
                }
                let orow = &mut out.row_mut(qt)[cols.clone()];
                for (kj, pj) in p.iter_mut().enumerate() {
                    *pj = *pj / total;
                    if *pj != F::zero() {
                        let vrow = &v.row(g.keys[kj])[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += *pj * x;
                        }
                    }
                }
            }
        }
        offset += heads * nq * nk;
    }
    Ok((out, probs))
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

#[derive(Debug)]
struct AttentionNode<F> {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    plan: Arc<AttentionPlan>,
    heads: usize,
    probs: Vec<F>,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Offset(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<F>, rstd: Vec<F> },
    Gather { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Attention(Box<AttentionNode<F>>),
    MeanRows(Var),
    SumAll(Var),
    Normalize { x: Var, norms: Vec<F> },
    RowDot(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<F> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Eager computation tape.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant: the stop-gradient operator.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b), ta, tb)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            bail!(Shape, "add of {:?} and {:?}", x.shape(), y.shape());
        }
        let mut value = x.clone();
        value.add_assign(y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds a `(1, cols)` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            bail!(Shape, "row broadcast of {:?} onto {:?}", r.shape(), x.shape());
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, &b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            bail!(Shape, "mul of {:?} and {:?}", x.shape(), y.shape());
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::from_vec(x.rows(), x.cols(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(value, Op::Offset(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Per-row layer normalization with `(1, cols)` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        for (name, p) in [("scale", gamma), ("shift", beta)] {
            if self.value(p).shape() != (1, d) {
                bail!(Shape, "layer norm {name} {:?} for width {d}", self.value(p).shape());
            }
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        let df = F::of(d as f64);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<F>() / df;
            let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Row gather: output row `r` is row `index[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = index.iter().find(|&&i| i >= xv.rows()) {
            bail!(Index, "row {bad} of a {}-row tensor", xv.rows());
        }
        let value = xv.select_rows(&index);
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Gather { x, index }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            bail!(Shape, "column concat of tensors with different row counts");
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            bail!(Shape, "row concat of tensors with different widths");
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(data.len() / cols.max(1), cols, data)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Fused multi-head attention; see [`attention_forward`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        plan: Arc<AttentionPlan>,
        heads: usize,
    ) -> Result<Var> {
        let (out, probs) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            bias.map(|b| self.value(b)),
            &plan,
            heads,
        )?;
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let ng = self.ng(&inputs);
        let node = AttentionNode { q, k, v, bias, plan, heads, probs };
        Ok(self.push(out, Op::Attention(Box::new(node)), ng))
    }

    /// Column means, `(1, cols)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let inv = F::one() / F::of(x.rows() as f64);
        let value = Tensor::from_fn(1, x.cols(), |_, c| (0..x.rows()).map(|r| x.get(r, c)).sum::<F>() * inv);
        let ng = self.ng(&[a]);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Scales each row to unit L2 norm; rows with norm below 1e-12 are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut norms = Vec::with_capacity(x.rows());
        let mut value = x.clone();
        for r in 0..x.rows() {
            let n = dot(x.row(r), x.row(r)).sqrt();
            if !n.is_finite() {
                bail!(Numeric, "row {r} has non-finite norm");
            }
            if n.as_f64() < NORM_FLOOR {
                bail!(Numeric, "row {r} has norm {:e} below {NORM_FLOOR:e}", n.as_f64());
            }
            for o in value.row_mut(r) {
                *o = *o / n;
            }
            norms.push(n);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Normalize { x: a, norms }, ng))
    }

    /// Row-wise inner products, `(rows, 1)`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            bail!(Shape, "row dot of {:?} and {:?}", x.shape(), y.shape());
        }
        let value = Tensor::from_fn(x.rows(), 1, |r, _| dot(x.row(r), y.row(r)));
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::RowDot(a, b), ng))
    }

    /// Summed softmax cross-entropy of each row of `logits` against its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if targets.len() != x.rows() {
            bail!(Shape, "{} targets for {} rows", targets.len(), x.rows());
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= x.cols()) {
            bail!(Index, "target {bad} outside {} classes", x.cols());
        }
        let mut probs = Tensor::zeros(x.rows(), x.cols());
        let mut loss = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().fold(F::neg_infinity(), |m, &z| m.max(z));
            let mut total = F::zero();
            for (c, &z) in row.iter().enumerate() {
                let e = (z - max).exp();
                probs.set(r, c, e);
                total += e;
            }
            for p in probs.row_mut(r) {
                *p = *p / total;
            }
            loss += total.ln() + max - row[t];
        }
        if !loss.is_finite() {
            bail!(Numeric, "cross-entropy is not finite");
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).shape() != (1, 1) {
            bail!(Shape, "backward from non-scalar {:?}", self.value(loss).shape());
        }
        self.backward_with(loss, Tensor::scalar(F::one()))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` for node `from`.
    pub fn backward_with(&self, from: Var, seed: Tensor<F>) -> Result<Grads<F>> {
        if seed.shape() != self.value(from).shape() {
            bail!(Shape, "seed {:?} for node of shape {:?}", seed.shape(), self.value(from).shape());
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(from.0 + 1, || None);
        if self.nodes[from.0].needs_grad {
            grads[from.0] = Some(seed);
        }
        for i in (0..=from.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> Option<&'g mut Tensor<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn backprop_node(&self, node: &Node<F>, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    if *ta {
                        gemm_into(bv, *tb, gout, true, F::one(), ga);
                    } else {
                        gemm_into(gout, false, bv, !*tb, F::one(), ga);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *tb {
                        gemm_into(gout, true, av, *ta, F::one(), gb);
                    } else {
                        gemm_into(av, !*ta, gout, false, F::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.slot(grads, v) {
                        g.add_assign(gout);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.add_assign(gout);
                }
                if let Some(g) = self.slot(grads, *row) {
                    for r in 0..gout.rows() {
                        for (o, &x) in g.data_mut().iter_mut().zip(gout.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                for (v, other) in [(*a, &bv), (*b, &av)] {
                    if let Some(g) = self.slot(grads, v) {
                        for ((o, &x), &y) in g.data_mut().iter_mut().zip(gout.data()).zip(other.data()) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.slot(grads, *a) {
                    for (o, &x) in g.data_mut().iter_mut().zip(gout.data()) {
                        *o += x * *s;
                    }
                }
            }
            Op::Offset(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.add_assign(gout);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).clone();
                if let Some(g) = self.slot(grads, *a) {
                    for ((o, &dy), &xi) in g.data_mut().iter_mut().zip(gout.data()).zip(x.data()) {
                        *o += dy * gelu_grad(xi);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma).clone();
                let (n, d) = xhat.shape();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..n {
                        for c in 0..d {
                            gg.data_mut()[c] += gout.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for r in 0..n {
                        for (o, &dy) in gb.data_mut().iter_mut().zip(gout.row(r)) {
                            *o += dy;
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let df = F::of(d as f64);
                    let mut scaled = vec![F::zero(); d];
                    for r in 0..n {
                        let mut mean_g = F::zero();
                        let mut mean_gx = F::zero();
                        for c in 0..d {
                            scaled[c] = gout.get(r, c) * gv.data()[c];
                            mean_g += scaled[c];
                            mean_gx += scaled[c] * xhat.get(r, c);
                        }
                        mean_g = mean_g / df;
                        mean_gx = mean_gx / df;
                        let row = gx.row_mut(r);
                        for c in 0..d {
                            row[c] += rstd[r] * (scaled[c] - mean_g - xhat.get(r, c) * mean_gx);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(g) = self.slot(grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        for (o, &dy) in g.row_mut(src).iter_mut().zip(gout.row(r)) {
                            *o += dy;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(g) = self.slot(grads, p) {
                        for r in 0..gout.rows() {
                            for (o, &dy) in g.row_mut(r).iter_mut().zip(&gout.row(r)[c0..c0 + w]) {
                                *o += dy;
                            }
                        }
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if let Some(g) = self.slot(grads, p) {
                        let w = g.cols();
                        for (o, &dy) in g.data_mut().iter_mut().zip(&gout.data()[r0 * w..(r0 + h) * w]) {
                            *o += dy;
                        }
                    }
                    r0 += h;
                }
            }
            Op::Attention(att) => self.backprop_attention(att, gout, grads),
            Op::MeanRows(a) => {
                if let Some(g) = self.slot(grads, *a) {
                    let inv = F::one() / F::of(g.rows() as f64);
                    for r in 0..g.rows() {
                        for (o, &dy) in g.row_mut(r).iter_mut().zip(gout.data()) {
                            *o += dy * inv;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let dy = gout.item();
                if let Some(g) = self.slot(grads, *a) {
                    for o in g.data_mut() {
                        *o += dy;
                    }
                }
            }
            Op::Normalize { x, norms } => {
                let y = &node.value;
                if let Some(g) = self.slot(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let dr = gout.row(r);
                        let proj = dot(yr, dr);
                        for ((o, &dy), &yi) in g.row_mut(r).iter_mut().zip(dr).zip(yr) {
                            *o += (dy - yi * proj) / n;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                for (v, other) in [(*a, &bv), (*b, &av)] {
                    if let Some(g) = self.slot(grads, v) {
                        for r in 0..g.rows() {
                            let dy = gout.get(r, 0);
                            for (o, &z) in g.row_mut(r).iter_mut().zip(other.row(r)) {
                                *o += dy * z;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let dy = gout.item();
                if let Some(g) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                            let onehot = if c == t { F::one() } else { F::zero() };
                            *o += dy * (probs.get(r, c) - onehot);
                        }
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, att: &AttentionNode<F>, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let (qv, kv, vv) = (self.value(att.q), self.value(att.k), self.value(att.v));
        let (n, dim) = qv.shape();
        let heads = att.heads;
        let dh = dim / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut dq = Tensor::zeros(n, dim);
        let mut dk = Tensor::zeros(n, dim);
        let mut dv = Tensor::zeros(n, dim);
        let mut dbias = att.bias.map(|b| Tensor::zeros(self.value(b).rows(), self.value(b).cols()));
        let mut dp = Vec::new();
        let mut offset = 0;
        for g in att.plan.groups() {
            let (nq, nk) = (g.queries.len(), g.keys.len());
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for (qi, &qt) in g.queries.iter().enumerate() {
                    let p = &att.probs[offset + (h * nq + qi) * nk..offset + (h * nq + qi + 1) * nk];
                    let go = &gout.row(qt)[cols.clone()];
                    dp.clear();
                    let mut weighted = F::zero();
                    for (kj, &kt) in g.keys.iter().enumerate() {
                        let pj = p[kj];
                        if pj == F::zero() {
                            dp.push(F::zero());
                            continue;
                        }
                        let d = dot(go, &vv.row(kt)[cols.clone()]);
                        dp.push(d);
                        weighted += pj * d;
                        for (o, &x) in dv.row_mut(kt)[cols.clone()].iter_mut().zip(go) {
                            *o += pj * x;
                        }
                    }
                    for (kj, &kt) in g.keys.iter().enumerate() {
                        let pj = p[kj];
                        if pj == F::zero() {
                            continue;
                        }
                        let ds = pj * (dp[kj] - weighted);
                        if let (Some(db), Some(idx)) = (dbias.as_mut(), &g.bias_index) {
                            let c = idx[qi * nk + kj];
                            db.row_mut(h)[c] += ds;
                        }
                        let s = ds * scale;
                        for c in cols.clone() {
                            dq.row_mut(qt)[c] += s * kv.get(kt, c);
                            dk.row_mut(kt)[c] += s * qv.get(qt, c);
                        }
                    }
                }
            }
            offset += heads * nq * nk;
        }
        for (v, d) in [(att.q, dq), (att.k, dk), (att.v, dv)] {
            if let Some(g) = self.slot(grads, v) {
                g.add_assign(&d);
            }
        }
        if let (Some(b), Some(d)) = (att.bias, dbias) {
            if let Some(g) = self.slot(grads, b) {
                g.add_assign(&d);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * du
}
