//! Multi-head attention sublayer and the shared linear/norm/MLP pieces.

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{AttentionPlan, AttnGroup, Graph, Var};
use crate::error::{bail, Result};
use crate::params::{Binder, Init};
use crate::tensor::Real;
use crate::tokenizer::name;

pub(crate) fn init_linear<F: Real, R: Rng>(init: &mut Init<'_, F, R>, prefix: &str, fan_in: usize, fan_out: usize) {
    init.xavier(name(prefix, "w"), fan_in, fan_out);
    init.constant(name(prefix, "b"), 1, fan_out, 0.0);
}

pub(crate) fn init_norm<F: Real, R: Rng>(init: &mut Init<'_, F, R>, prefix: &str, dim: usize) {
    init.constant(name(prefix, "g"), 1, dim, 1.0);
    init.constant(name(prefix, "b"), 1, dim, 0.0);
}

pub(crate) fn linear<F: Real>(g: &mut Graph<F>, p: &mut Binder<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(g, &name(prefix, "w"))?;
    let b = p.get(g, &name(prefix, "b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn layer_norm<F: Real>(g: &mut Graph<F>, p: &mut Binder<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.get(g, &name(prefix, "g"))?;
    let beta = p.get(g, &name(prefix, "b"))?;
    g.layer_norm(x, gamma, beta)
}

/// Two-layer perceptron `in -> hidden -> out` with a GELU in between.
pub fn init_mlp<F: Real, R: Rng>(init: &mut Init<'_, F, R>, prefix: &str, dim_in: usize, hidden: usize, dim_out: usize) {
    init_linear(init, &name(prefix, "fc1"), dim_in, hidden);
    init_linear(init, &name(prefix, "fc2"), hidden, dim_out);
}

pub fn mlp<F: Real>(g: &mut Graph<F>, p: &mut Binder<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &name(prefix, "fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &name(prefix, "fc2"), h)
}

/// Query, key, value and output projections, plus an optional
/// `(heads, bias_len)` relative-bias table named `rel_bias`.
pub fn init_mha<F: Real, R: Rng>(
    init: &mut Init<'_, F, R>,
    prefix: &str,
    dim: usize,
    heads: usize,
    bias_len: Option<usize>,
) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(init, &name(prefix, proj), dim, dim);
    }
    if let Some(len) = bias_len {
        init.normal(name(prefix, "rel_bias"), heads, len, 0.02);
    }
}

/// Multi-head attention over `x` following `plan`, without residual or
/// normalization: per head `softmax(Q K^T / sqrt(d_head) + bias)` over the
/// unmasked keys times `V`, heads concatenated and output-projected.
pub fn mha<F: Real>(
    g: &mut Graph<F>,
    p: &mut Binder<'_, F>,
    prefix: &str,
    x: Var,
    plan: &Arc<AttentionPlan>,
    heads: usize,
    bias: Option<Var>,
) -> Result<Var> {
    let q = linear(g, p, &name(prefix, "q"), x)?;
    let k = linear(g, p, &name(prefix, "k"), x)?;
    let v = linear(g, p, &name(prefix, "v"), x)?;
    let a = g.attention(q, k, v, bias, plan.clone(), heads)?;
    linear(g, p, &name(prefix, "o"), a)
}

/// Full attention over `n` tokens with an optional `n x n` mask and, when
/// `with_bias`, a `(heads, n * n)` bias table indexed `i * n + j`.
pub fn dense_plan(n: usize, mask: Option<Vec<bool>>, with_bias: bool) -> Result<AttentionPlan> {
    if let Some(m) = &mask {
        if m.len() != n * n {
            bail!(Shape, "mask of {} entries for {n} tokens", m.len());
        }
    }
    let group = AttnGroup {
        queries: (0..n).collect(),
        keys: (0..n).collect(),
        mask,
        bias_index: with_bias.then(|| (0..n * n).collect()),
    };
    AttentionPlan::new(n, alloc::vec![group], with_bias.then_some(n * n))
}
