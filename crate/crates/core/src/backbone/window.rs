//! Space-time window partitions with cyclic shift and 3D relative offsets.
//!
//! A window spans every frame of the clip and a `w_h x w_w` spatial block.
//! Shifted partitions roll the grid by `(s_h, s_w)` first: rolled row `r`
//! holds original row `(r + s_h) mod H_p`. Tokens that wrapped around the
//! border share a window with tokens that were not their neighbours, so a
//! region mask keeps them apart.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AttentionPlan, AttnGroup};
use crate::error::{bail, Result};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::GridLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub window: (usize, usize),
    pub shift: (usize, usize),
}

impl WindowSpec {
    pub fn uniform(window: (usize, usize)) -> Self {
        Self { window, shift: (0, 0) }
    }

    /// Half-window shift along every axis the window does not already cover.
    pub fn shifted(window: (usize, usize), layout: &GridLayout) -> Self {
        let half = |w: usize, n: usize| if w < n { w / 2 } else { 0 };
        Self { window, shift: (half(window.0, layout.rows), half(window.1, layout.cols)) }
    }

    pub fn validate(&self, layout: &GridLayout) -> Result<()> {
        let (wh, ww) = self.window;
        let (sh, sw) = self.shift;
        if wh == 0 || ww == 0 || layout.rows % wh != 0 || layout.cols % ww != 0 {
            bail!(Shape, "window {wh}x{ww} does not tile a {}x{} grid", layout.rows, layout.cols);
        }
        if sh >= wh || sw >= ww {
            bail!(Shape, "shift ({sh}, {sw}) must be smaller than window {wh}x{ww}");
        }
        Ok(())
    }

    pub fn tokens_per_window(&self, frames: usize) -> usize {
        frames * self.window.0 * self.window.1
    }
}

/// Lookup of the relative-bias table for offsets inside one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelPosIndex {
    pub frames: usize,
    pub window: (usize, usize),
}

impl RelPosIndex {
    pub fn len(&self) -> usize {
        (2 * self.frames - 1) * (2 * self.window.0 - 1) * (2 * self.window.1 - 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Entry for offset `(dt, dh, dw)`, each in `-(n - 1)..=n - 1`.
    pub fn index(&self, dt: isize, dh: isize, dw: isize) -> usize {
        let (nt, nh, nw) = (self.frames as isize, self.window.0 as isize, self.window.1 as isize);
        debug_assert!(dt.abs() < nt && dh.abs() < nh && dw.abs() < nw);
        (((dt + nt - 1) * (2 * nh - 1) + (dh + nh - 1)) * (2 * nw - 1) + (dw + nw - 1)) as usize
    }
}

/// Result of partitioning a token grid into windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPartition {
    pub layout: GridLayout,
    pub spec: WindowSpec,
    /// Grid indices of each window's tokens, ordered `(t, local row, local col)`.
    pub windows: Vec<Vec<usize>>,
    /// `(window, slot)` of every grid token: the inverse of `windows`.
    pub slots: Vec<(usize, usize)>,
    /// Local `(t, row, col)` of each slot, shared by every window.
    local: Vec<(usize, usize, usize)>,
    /// Shift region of every grid token (all zero when unshifted).
    region: Vec<u8>,
}

/// Partitions `layout` into windows, applying the cyclic shift of `spec`.
pub fn window_partition(layout: GridLayout, spec: WindowSpec) -> Result<WindowPartition> {
    spec.validate(&layout)?;
    let (wh, ww) = spec.window;
    let (sh, sw) = spec.shift;
    let (nh, nw) = (layout.rows / wh, layout.cols / ww);
    let per = spec.tokens_per_window(layout.frames);
    let region_of = |r: usize, n: usize, w: usize, s: usize| -> u8 {
        if s == 0 || r < n - w {
            0
        } else if r < n - s {
            1
        } else {
            2
        }
    };
    let mut windows = vec![Vec::with_capacity(per); nh * nw];
    let mut slots = vec![(0, 0); layout.len()];
    let mut region = vec![0u8; layout.len()];
    let mut local = Vec::with_capacity(per);
    for t in 0..layout.frames {
        for ly in 0..wh {
            for lx in 0..ww {
                local.push((t, ly, lx));
            }
        }
    }
    for (wi, window) in windows.iter_mut().enumerate() {
        let (by, bx) = (wi / nw, wi % nw);
        for &(t, ly, lx) in &local {
            let (ry, rx) = (by * wh + ly, bx * ww + lx);
            let (y, x) = ((ry + sh) % layout.rows, (rx + sw) % layout.cols);
            let i = layout.index(t, y, x);
            slots[i] = (wi, window.len());
            region[i] = region_of(ry, layout.rows, wh, sh) * 3 + region_of(rx, layout.cols, ww, sw);
            window.push(i);
        }
    }
    Ok(WindowPartition { layout, spec, windows, slots, local, region })
}

impl WindowPartition {
    pub fn rel_index(&self) -> RelPosIndex {
        RelPosIndex { frames: self.layout.frames, window: self.spec.window }
    }

    /// Row-major `(slot_i, slot_j)` mask of window `w`; `None` when nothing is masked.
    pub fn mask(&self, w: usize) -> Option<Vec<bool>> {
        let tokens = &self.windows[w];
        let m: Vec<bool> = tokens
            .iter()
            .flat_map(|&i| tokens.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.region[i] == self.region[j])
            .collect();
        (!m.iter().all(|&a| a)).then_some(m)
    }

    /// Bias-table entries for every slot pair of a window.
    pub fn bias_index(&self) -> Vec<usize> {
        let rel = self.rel_index();
        let mut idx = Vec::with_capacity(self.local.len() * self.local.len());
        for &(ti, yi, xi) in &self.local {
            for &(tj, yj, xj) in &self.local {
                idx.push(rel.index(
                    ti as isize - tj as isize,
                    yi as isize - yj as isize,
                    xi as isize - xj as isize,
                ));
            }
        }
        idx
    }

    /// One attention group per window over the grid's token rows.
    pub fn attention_plan(&self, with_bias: bool) -> Result<AttentionPlan> {
        let bias = with_bias.then(|| self.bias_index());
        let groups = self
            .windows
            .iter()
            .enumerate()
            .map(|(w, tokens)| AttnGroup {
                queries: tokens.clone(),
                keys: tokens.clone(),
                mask: self.mask(w),
                bias_index: bias.clone(),
            })
            .collect();
        AttentionPlan::new(self.layout.len(), groups, with_bias.then(|| self.rel_index().len()))
    }

    /// Ordered token pairs `(i, j)` allowed to attend.
    pub fn adjacency(&self) -> BTreeSet<(usize, usize)> {
        let mut set = BTreeSet::new();
        for (w, tokens) in self.windows.iter().enumerate() {
            let mask = self.mask(w);
            let n = tokens.len();
            for (a, &i) in tokens.iter().enumerate() {
                for (b, &j) in tokens.iter().enumerate() {
                    if mask.as_ref().is_none_or(|m| m[a * n + b]) {
                        set.insert((i, j));
                    }
                }
            }
        }
        set
    }

    /// Token rows of each window.
    pub fn split<F: Real>(&self, tokens: &Tensor<F>) -> Vec<Tensor<F>> {
        self.windows.iter().map(|w| tokens.select_rows(w)).collect()
    }

    /// Inverse of [`split`](Self::split).
    pub fn merge<F: Real>(&self, windows: &[Tensor<F>]) -> Result<Tensor<F>> {
        let cols = windows.first().map_or(0, Tensor::cols);
        if windows.len() != self.windows.len()
            || windows.iter().zip(&self.windows).any(|(t, w)| t.shape() != (w.len(), cols))
        {
            bail!(Shape, "window tensors do not match the partition");
        }
        Ok(Tensor::from_fn(self.layout.len(), cols, |i, c| {
            let (w, s) = self.slots[i];
            windows[w].get(s, c)
        }))
    }
}
