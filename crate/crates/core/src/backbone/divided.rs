//! Divided space-time attention: temporal attention across frames at a
//! fixed patch position, then spatial attention within each frame.
//!
//! The class token skips the temporal stage. In the spatial stage it attends
//! over itself and every patch token; patch tokens do not attend to it.

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use super::mha::{init_mha, init_mlp, init_norm, layer_norm, mha, mlp};
use crate::autodiff::{AttentionPlan, AttnGroup, Graph};
use crate::error::{bail, Result};
use crate::params::{Binder, Init};
use crate::tensor::Real;
use crate::tokenizer::{name, GridLayout, TokenGrid};

/// Attention plans shared by every divided block over one grid shape.
#[derive(Clone, Debug)]
pub struct DividedPlans {
    pub layout: GridLayout,
    /// Over the `layout.len()` patch tokens.
    pub temporal: Arc<AttentionPlan>,
    /// Over the class token (row 0) followed by the patch tokens.
    pub spatial: Arc<AttentionPlan>,
}

impl DividedPlans {
    pub fn new(layout: GridLayout) -> Result<Self> {
        let n = layout.len();
        let per_frame = layout.rows * layout.cols;
        let temporal = (0..per_frame)
            .map(|s| {
                let idx: Vec<usize> = (0..layout.frames).map(|t| t * per_frame + s).collect();
                AttnGroup::dense(idx.clone(), idx)
            })
            .collect();
        let mut spatial: Vec<AttnGroup> = (0..layout.frames)
            .map(|t| {
                let idx: Vec<usize> = (1 + t * per_frame..1 + (t + 1) * per_frame).collect();
                AttnGroup::dense(idx.clone(), idx)
            })
            .collect();
        spatial.push(AttnGroup::dense(alloc::vec![0], (0..=n).collect()));
        Ok(Self {
            layout,
            temporal: Arc::new(AttentionPlan::new(n, temporal, None)?),
            spatial: Arc::new(AttentionPlan::new(n + 1, spatial, None)?),
        })
    }
}

pub fn init_divided_block<F: Real, R: Rng>(
    init: &mut Init<'_, F, R>,
    prefix: &str,
    dim: usize,
    heads: usize,
    mlp_ratio: usize,
) {
    init_norm(init, &name(prefix, "time_norm"), dim);
    init_mha(init, &name(prefix, "time"), dim, heads, None);
    init_norm(init, &name(prefix, "space_norm"), dim);
    init_mha(init, &name(prefix, "space"), dim, heads, None);
    init_norm(init, &name(prefix, "mlp_norm"), dim);
    init_mlp(init, &name(prefix, "mlp"), dim, mlp_ratio * dim, dim);
}

/// `z_t = MHA_time(LN(z)) + z`, `z_s = MHA_space(LN(z_t)) + z_t`,
/// `z' = MLP(LN(z_s)) + z_s`.
pub fn divided_st_block<F: Real>(
    g: &mut Graph<F>,
    p: &mut Binder<'_, F>,
    prefix: &str,
    grid: TokenGrid,
    plans: &DividedPlans,
    heads: usize,
) -> Result<TokenGrid> {
    let Some(cls) = grid.class_token else {
        bail!(Config, "divided space-time blocks need a class token");
    };
    if grid.layout != plans.layout {
        bail!(Shape, "grid {:?} does not match plans for {:?}", grid.layout, plans.layout);
    }
    let h = layer_norm(g, p, &name(prefix, "time_norm"), grid.tokens)?;
    let a = mha(g, p, &name(prefix, "time"), h, &plans.temporal, heads, None)?;
    let tokens = g.add(grid.tokens, a)?;

    let seq = g.concat_rows(&[cls, tokens])?;
    let h = layer_norm(g, p, &name(prefix, "space_norm"), seq)?;
    let a = mha(g, p, &name(prefix, "space"), h, &plans.spatial, heads, None)?;
    let seq = g.add(seq, a)?;

    let h = layer_norm(g, p, &name(prefix, "mlp_norm"), seq)?;
    let m = mlp(g, p, &name(prefix, "mlp"), h)?;
    let seq = g.add(seq, m)?;
    TokenGrid::from_sequence(g, seq, grid.layout, true)
}
