//! Video transformer backbones producing one feature vector per clip.

mod divided;
mod mha;
mod swin;
mod window;


pub use divided::{divided_st_block, init_divided_block, DividedPlans};
pub use mha::{dense_plan, init_mha, init_mlp, mha, mlp};
pub use swin::{init_patch_merge, merged_layout, patch_merge, swin_block, SwinStage};
pub use window::{window_partition, RelPosIndex, WindowPartition, WindowSpec};

#[allow(unused_imports)]
pub(crate) use mha::{init_linear, init_norm, layer_norm, linear};

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Error, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{name, patchify, EmbeddingConfig, GridLayout, PositionMode};
use crate::videogen::Clip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// TimeSformer-style divided space-time blocks with a class token.
    DividedSt,
    /// Space-time Swin stages with relative bias and mean pooling.
    StSwin,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::DividedSt => "divided_st",
            Variant::StSwin => "st_swin",
        }
    }

    pub fn readout(self) -> Readout {
        match self {
            Variant::DividedSt => Readout::ClassToken,
            Variant::StSwin => Readout::MeanPool,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "divided_st" => Ok(Variant::DividedSt),
            "st_swin" => Ok(Variant::StSwin),
            other => bail!(Config, "unknown backbone variant `{other}`"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    ClassToken,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Clip frames `T`.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Embedding width `D` (first-stage width for ST Swin).
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of divided blocks.
    pub depth: usize,
    /// Uniform/shifted block pairs per Swin stage; stages after the first
    /// are preceded by a patch merge that halves the grid and doubles the width.
    pub stages: Vec<usize>,
    /// Spatial window of the Swin stages, clamped to each stage's grid.
    pub window: (usize, usize),
}

impl BackboneConfig {
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            frames: 4,
            height: 16,
            width: 16,
            channels: 1,
            patch: 4,
            dim: 32,
            heads: 4,
            mlp_ratio: 4,
            depth: 2,
            stages: alloc::vec![1, 1],
            window: (2, 2),
        }
    }

    pub fn layout(&self) -> GridLayout {
        GridLayout { frames: self.frames, rows: self.height / self.patch, cols: self.width / self.patch }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Feature width after the last stage.
    pub fn out_dim(&self) -> usize {
        match self.variant {
            Variant::DividedSt => self.dim,
            Variant::StSwin => self.dim << self.stages.len().saturating_sub(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            bail!(Config, "frames, channels, dim, heads and mlp_ratio must be positive");
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            bail!(Config, "patch {} does not divide {}x{}", self.patch, self.height, self.width);
        }
        if self.dim % self.heads != 0 {
            bail!(Config, "{} heads do not divide width {}", self.heads, self.dim);
        }
        match self.variant {
            Variant::DividedSt if self.depth == 0 => bail!(Config, "depth must be at least 1"),
            Variant::StSwin if self.stages.is_empty() || self.stages.contains(&0) => {
                bail!(Config, "every Swin stage needs at least one block pair")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Divided(DividedPlans),
    Swin(Vec<SwinStage>),
}

/// A configured backbone with its precomputed attention plans. Parameters
/// live in a [`ParamStore`] under a caller-chosen prefix.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    embed: EmbeddingConfig,
    body: Body,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let (mode, class_token) = match cfg.variant {
            Variant::DividedSt => (PositionMode::Absolute, true),
            Variant::StSwin => (PositionMode::Relative, false),
        };
        let embed = EmbeddingConfig { layout, patch_dim: cfg.patch_dim(), width: cfg.dim, mode, class_token };
        let body = match cfg.variant {
            Variant::DividedSt => Body::Divided(DividedPlans::new(layout)?),
            Variant::StSwin => {
                let mut stages = Vec::with_capacity(cfg.stages.len());
                let mut l = layout;
                for s in 0..cfg.stages.len() {
                    if s > 0 {
                        l = merged_layout(l)?;
                    }
                    stages.push(SwinStage::new(l, cfg.window)?);
                }
                Body::Swin(stages)
            }
        };
        Ok(Self { cfg, embed, body })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn readout(&self) -> Readout {
        self.cfg.variant.readout()
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim()
    }

    pub fn init<F: Real, R: Rng>(&self, init: &mut Init<'_, F, R>, prefix: &str) {
        let c = &self.cfg;
        self.embed.init(init, &name(prefix, "embed"));
        match &self.body {
            Body::Divided(_) => {
                for b in 0..c.depth {
                    init_divided_block(init, &name(prefix, &format!("blocks.{b}")), c.dim, c.heads, c.mlp_ratio);
                }
            }
            Body::Swin(stages) => {
                let mut dim = c.dim;
                for (s, stage) in stages.iter().enumerate() {
                    if s > 0 {
                        init_patch_merge(init, &name(prefix, &format!("merge.{s}")), dim, 2 * dim);
                        dim *= 2;
                    }
                    stage.init(init, &name(prefix, &format!("stages.{s}")), c.stages[s], dim, c.heads, c.mlp_ratio);
                }
            }
        }
        init_norm(init, &name(prefix, "norm"), self.out_dim());
    }

    pub fn init_store<F: Real, R: Rng>(&self, rng: &mut R, prefix: &str) -> ParamStore<F> {
        let mut store = ParamStore::new();
        self.init(&mut Init { store: &mut store, rng }, prefix);
        store
    }

    /// Patch rows of `clip` as a tensor, checked against the configured shape.
    pub fn patches<F: Real>(&self, clip: &Clip) -> Result<Tensor<F>> {
        let c = &self.cfg;
        if (clip.frames, clip.height, clip.width, clip.channels) != (c.frames, c.height, c.width, c.channels) {
            bail!(
                Config,
                "clip {}x{}x{}x{} does not match backbone {}x{}x{}x{}",
                clip.frames, clip.height, clip.width, clip.channels, c.frames, c.height, c.width, c.channels
            );
        }
        Ok(patchify::<F>(clip, c.patch)?.data)
    }

    /// `(1, out_dim)` feature of one clip given its `(N, P*P*C)` patch rows.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &mut Binder<'_, F>, prefix: &str, patches: Var) -> Result<Var> {
        let grid = self.embed.embed(g, p, &name(prefix, "embed"), patches)?;
        let feature = match &self.body {
            Body::Divided(plans) => {
                let mut grid = grid;
                for b in 0..self.cfg.depth {
                    grid = divided_st_block(g, p, &name(prefix, &format!("blocks.{b}")), grid, plans, self.cfg.heads)?;
                }
                grid.class_token.ok_or_else(|| Error::Config("class-token readout without a class token".into()))?
            }
            Body::Swin(stages) => {
                if grid.class_token.is_some() {
                    bail!(Config, "mean-pool readout does not take a class token");
                }
                let (mut x, mut layout) = (grid.tokens, grid.layout);
                for (s, stage) in stages.iter().enumerate() {
                    if s > 0 {
                        (x, layout) = patch_merge(g, p, &name(prefix, &format!("merge.{s}")), x, layout)?;
                    }
                    x = stage.forward(g, p, &name(prefix, &format!("stages.{s}")), x, self.cfg.stages[s], self.cfg.heads)?;
                }
                x = layer_norm(g, p, &name(prefix, "norm"), x)?;
                return Ok(g.mean_rows(x));
            }
        };
        layer_norm(g, p, &name(prefix, "norm"), feature)
    }

    /// Forward pass on a clip with frozen parameters, returning the feature row.
    pub fn features<F: Real>(&self, store: &ParamStore<F>, prefix: &str, clip: &Clip) -> Result<Vec<F>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(store);
        let x = g.constant(self.patches(clip)?);
        let out = self.forward(&mut g, &mut p, prefix, x)?;
        Ok(g.value(out).data().to_vec())
    }
}
