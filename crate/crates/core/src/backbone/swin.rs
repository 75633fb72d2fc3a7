//! Space-time Swin stages and spatial patch merging.

use alloc::sync::Arc;

use rand::Rng;

use super::mha::{init_mha, init_mlp, init_norm, layer_norm, mha, mlp};
use super::window::{window_partition, WindowSpec};
use crate::autodiff::{AttentionPlan, Graph, Var};
use crate::error::{bail, Result};
use crate::params::{Binder, Init};
use crate::tensor::Real;
use crate::tokenizer::{name, GridLayout};

/// Window plans for one stage: a uniform block and a shifted block.
#[derive(Clone, Debug)]
pub struct SwinStage {
    pub layout: GridLayout,
    pub uniform: WindowSpec,
    pub shifted: WindowSpec,
    uniform_plan: Arc<AttentionPlan>,
    shifted_plan: Arc<AttentionPlan>,
    bias_len: usize,
}

impl SwinStage {
    /// Window clamped to the grid; the shifted block uses a half-window shift.
    pub fn new(layout: GridLayout, window: (usize, usize)) -> Result<Self> {
        let window = (window.0.min(layout.rows), window.1.min(layout.cols));
        Self::with_specs(layout, WindowSpec::uniform(window), WindowSpec::shifted(window, &layout))
    }

    pub fn with_specs(layout: GridLayout, uniform: WindowSpec, shifted: WindowSpec) -> Result<Self> {
        if uniform.window != shifted.window || uniform.shift != (0, 0) {
            bail!(Config, "stage needs an unshifted and a shifted spec over the same window");
        }
        let u = window_partition(layout, uniform)?;
        let s = window_partition(layout, shifted)?;
        Ok(Self {
            layout,
            uniform,
            shifted,
            bias_len: u.rel_index().len(),
            uniform_plan: Arc::new(u.attention_plan(true)?),
            shifted_plan: Arc::new(s.attention_plan(true)?),
        })
    }

    pub fn bias_len(&self) -> usize {
        self.bias_len
    }

    /// Parameters of `pairs` (uniform, shifted) block pairs.
    pub fn init<F: Real, R: Rng>(
        &self,
        init: &mut Init<'_, F, R>,
        prefix: &str,
        pairs: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) {
        for b in 0..2 * pairs {
            let bp = name(prefix, &alloc::format!("blocks.{b}"));
            init_norm(init, &name(&bp, "attn_norm"), dim);
            init_mha(init, &name(&bp, "attn"), dim, heads, Some(self.bias_len));
            init_norm(init, &name(&bp, "mlp_norm"), dim);
            init_mlp(init, &name(&bp, "mlp"), dim, mlp_ratio * dim, dim);
        }
    }

    /// Alternates uniform and shifted window blocks, `2 * pairs` in total.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &mut Binder<'_, F>,
        prefix: &str,
        mut x: Var,
        pairs: usize,
        heads: usize,
    ) -> Result<Var> {
        if g.value(x).rows() != self.layout.len() {
            bail!(Shape, "stage expects {} tokens, got {}", self.layout.len(), g.value(x).rows());
        }
        for b in 0..2 * pairs {
            let plan = if b % 2 == 0 { &self.uniform_plan } else { &self.shifted_plan };
            x = swin_block(g, p, &name(prefix, &alloc::format!("blocks.{b}")), x, plan, heads)?;
        }
        Ok(x)
    }
}

/// `z = MHA_window(LN(z)) + z`, `z' = MLP(LN(z)) + z`, with the block's
/// relative bias added to the window logits.
pub fn swin_block<F: Real>(
    g: &mut Graph<F>,
    p: &mut Binder<'_, F>,
    prefix: &str,
    x: Var,
    plan: &Arc<AttentionPlan>,
    heads: usize,
) -> Result<Var> {
    let bias = p.get(g, &name(prefix, "attn.rel_bias"))?;
    let h = layer_norm(g, p, &name(prefix, "attn_norm"), x)?;
    let a = mha(g, p, &name(prefix, "attn"), h, plan, heads, Some(bias))?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &name(prefix, "mlp_norm"), x)?;
    let m = mlp(g, p, &name(prefix, "mlp"), h)?;
    g.add(x, m)
}

/// Grid after merging 2x2 spatial groups; frames are unchanged.
pub fn merged_layout(layout: GridLayout) -> Result<GridLayout> {
    if layout.rows % 2 != 0 || layout.cols % 2 != 0 {
        bail!(Shape, "cannot merge a {}x{} patch grid", layout.rows, layout.cols);
    }
    Ok(GridLayout { frames: layout.frames, rows: layout.rows / 2, cols: layout.cols / 2 })
}

pub fn init_patch_merge<F: Real, R: Rng>(init: &mut Init<'_, F, R>, prefix: &str, dim_in: usize, dim_out: usize) {
    init.xavier(name(prefix, "w"), 4 * dim_in, dim_out);
}

/// Concatenates each 2x2 group of the same frame in the order
/// `(2y, 2x), (2y+1, 2x), (2y, 2x+1), (2y+1, 2x+1)` and projects it with
/// `{prefix}.w` of shape `(4 D_in, D_out)`.
pub fn patch_merge<F: Real>(
    g: &mut Graph<F>,
    p: &mut Binder<'_, F>,
    prefix: &str,
    x: Var,
    layout: GridLayout,
) -> Result<(Var, GridLayout)> {
    let out = merged_layout(layout)?;
    if g.value(x).rows() != layout.len() {
        bail!(Shape, "merge expects {} tokens, got {}", layout.len(), g.value(x).rows());
    }
    let mut parts = [x; 4];
    for (k, (dy, dx)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        let idx = (0..out.len())
            .map(|i| {
                let (t, y, xx) = out.coords(i);
                layout.index(t, 2 * y + dy, 2 * xx + dx)
            })
            .collect();
        parts[k] = g.gather_rows(x, idx)?;
    }
    let cat = g.concat_cols(&parts)?;
    let w = p.get(g, &name(prefix, "w"))?;
    Ok((g.matmul(cat, w)?, out))
}
