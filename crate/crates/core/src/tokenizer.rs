//! Patch extraction and token embedding.
//!
//! Token order is time-major, then patch row, then patch column. Patch
//! vectors flatten each `P x P x C` block row-major over `(y, x, c)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::videogen::Clip;

/// Shape of a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridLayout {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridLayout {
    pub fn len(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.rows + y) * self.cols + x
    }

    /// `(t, y, x)` of a token index.
    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i / (self.rows * self.cols), (i / self.cols) % self.rows, i % self.cols)
    }
}

/// Patch vectors of one clip, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches<F> {
    pub layout: GridLayout,
    pub patch: usize,
    pub channels: usize,
    pub data: Tensor<F>,
}

pub fn patchify<F: Real>(clip: &Clip, patch: usize) -> Result<Patches<F>> {
    if patch == 0 || clip.height % patch != 0 || clip.width % patch != 0 {
        bail!(Shape, "patch side {patch} does not divide a {}x{} frame", clip.height, clip.width);
    }
    let layout = GridLayout { frames: clip.frames, rows: clip.height / patch, cols: clip.width / patch };
    let c = clip.channels;
    let width = patch * patch * c;
    let mut data = Tensor::zeros(layout.len(), width);
    for t in 0..layout.frames {
        for py in 0..layout.rows {
            for px in 0..layout.cols {
                let row = data.row_mut(layout.index(t, py, px));
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            row[(dy * patch + dx) * c + ch] =
                                F::of(clip.at(t, py * patch + dy, px * patch + dx, ch) as f64);
                        }
                    }
                }
            }
        }
    }
    Ok(Patches { layout, patch, channels: c, data })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<F: Real>(patches: &Patches<F>) -> Clip {
    let GridLayout { frames, rows, cols } = patches.layout;
    let (p, c) = (patches.patch, patches.channels);
    let mut clip = Clip::constant(frames, rows * p, cols * p, c, 0.0);
    let w = cols * p;
    for i in 0..patches.layout.len() {
        let (t, py, px) = patches.layout.coords(i);
        let row = patches.data.row(i);
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..c {
                    let (y, x) = (py * p + dy, px * p + dx);
                    clip.data[((t * rows * p + y) * w + x) * c + ch] = row[(dy * p + dx) * c + ch].as_f64() as f32;
                }
            }
        }
    }
    clip
}

/// Which positional term the embedding adds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionMode {
    /// Learnable space-time table with one extra row for the class token.
    Absolute,
    /// No absolute term; attention blocks carry relative biases.
    Relative,
}

/// Embedded tokens of one clip inside a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub layout: GridLayout,
    pub width: usize,
    /// `(layout.len(), width)`.
    pub tokens: Var,
    /// `(1, width)` when present.
    pub class_token: Option<Var>,
}

impl TokenGrid {
    /// Canonical sequence: class token first (when present), then tokens in layout order.
    pub fn to_sequence<F: Real>(&self, g: &mut Graph<F>) -> Result<Var> {
        match self.class_token {
            Some(c) => g.concat_rows(&[c, self.tokens]),
            None => Ok(self.tokens),
        }
    }

    /// Splits a canonical sequence back into a grid.
    pub fn from_sequence<F: Real>(
        g: &mut Graph<F>,
        seq: Var,
        layout: GridLayout,
        with_class: bool,
    ) -> Result<Self> {
        let (rows, width) = g.value(seq).shape();
        let offset = with_class as usize;
        if rows != layout.len() + offset {
            bail!(Shape, "sequence of {rows} rows for {} tokens (class token: {with_class})", layout.len());
        }
        if !with_class {
            return Ok(Self { layout, width, tokens: seq, class_token: None });
        }
        let class_token = g.gather_rows(seq, alloc::vec![0])?;
        let tokens = g.gather_rows(seq, (1..rows).collect())?;
        Ok(Self { layout, width, tokens, class_token: Some(class_token) })
    }
}

/// Shapes of the embedding parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingConfig {
    pub layout: GridLayout,
    pub patch_dim: usize,
    pub width: usize,
    pub mode: PositionMode,
    pub class_token: bool,
}

impl EmbeddingConfig {
    pub fn init<F: Real, R: Rng>(&self, init: &mut Init<'_, F, R>, prefix: &str) {
        init.xavier(name(prefix, "weight"), self.patch_dim, self.width);
        if self.mode == PositionMode::Absolute {
            init.normal(name(prefix, "pos"), self.layout.len() + 1, self.width, 0.02);
        }
        if self.class_token {
            init.normal(name(prefix, "cls"), 1, self.width, 0.02);
        }
    }

    /// `token = W p + e`; the class token is its seed vector plus `e[0]`.
    pub fn embed<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &mut Binder<'_, F>,
        prefix: &str,
        patches: Var,
    ) -> Result<TokenGrid> {
        let shape = g.value(patches).shape();
        if shape != (self.layout.len(), self.patch_dim) {
            bail!(Shape, "patches {shape:?}, expected ({}, {})", self.layout.len(), self.patch_dim);
        }
        let w = params.get(g, &name(prefix, "weight"))?;
        let mut tokens = g.matmul(patches, w)?;
        let pos = match self.mode {
            PositionMode::Absolute => {
                let table = params.get(g, &name(prefix, "pos"))?;
                let rows = g.gather_rows(table, (1..=self.layout.len()).collect())?;
                tokens = g.add(tokens, rows)?;
                Some(table)
            }
            PositionMode::Relative => None,
        };
        let class_token = if self.class_token {
            let mut c = params.get(g, &name(prefix, "cls"))?;
            if let Some(table) = pos {
                let first = g.gather_rows(table, alloc::vec![0])?;
                c = g.add(c, first)?;
            }
            Some(c)
        } else {
            None
        };
        Ok(TokenGrid { layout: self.layout, width: self.width, tokens, class_token })
    }
}

pub(crate) fn name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        String::from(leaf)
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Parameter names used by [`EmbeddingConfig::embed`].
pub fn embedding_param_names(cfg: &EmbeddingConfig, prefix: &str) -> Vec<String> {
    let mut v = alloc::vec![name(prefix, "weight")];
    if cfg.mode == PositionMode::Absolute {
        v.push(name(prefix, "pos"));
    }
    if cfg.class_token {
        v.push(name(prefix, "cls"));
    }
    v
}

/// Store holding only embedding parameters, for tests and tools.
pub fn init_embedding<F: Real, R: Rng>(cfg: &EmbeddingConfig, rng: &mut R, prefix: &str) -> ParamStore<F> {
    let mut store = ParamStore::new();
    cfg.init(&mut Init { store: &mut store, rng }, prefix);
    store
}
