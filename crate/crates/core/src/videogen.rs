//! Synthetic labelled videos with long-range temporal structure, clip-pair
//! sampling and the clip augmentation recipe.
//!
//! Each video shows one bright square moving on a torus and leaving a short
//! fading trail. The video is split into `segment_count` equal segments and
//! the square's velocity is constant within a segment. A class is an ordered
//! sequence of segment motions; every motion and every motion transition used
//! by a class also occurs in at least one other class, so no window shorter
//! than a segment identifies the label.
//!
//! A motion fixes the vertical velocity and the horizontal speed. The
//! horizontal direction is drawn once per video, which keeps the horizontal
//! flip of the augmentation recipe label-preserving.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::Float;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Error, Result};

pub mod oracle;

/// `(vertical velocity, horizontal speed)` in pixels per frame, indexed by motion id.
pub const MOTIONS: [(f64, f64); 8] = [
    (-1.5, 0.0),
    (-0.75, 0.0),
    (0.75, 0.0),
    (1.5, 0.0),
    (-1.5, 0.75),
    (-0.75, 0.75),
    (0.75, 0.75),
    (1.5, 0.75),
];

const PATTERN_SEARCH_SEED: u64 = 0x5eed_1e57_c1a5_5e5;
const PATTERN_SEARCH_ATTEMPTS: usize = 20_000;
const DISJOINT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub k_classes: usize,
    pub t_total: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub segment_count: usize,
    pub noise_std: f64,
    /// Side of the moving square in pixels.
    pub square: usize,
    /// Past positions drawn behind the square as a fading trail.
    pub trail: usize,
    /// Intensity ratio between consecutive trail positions, in `[0, 1)`.
    pub trail_decay: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            k_classes: 10,
            t_total: 64,
            height: 16,
            width: 16,
            channels: 1,
            segment_count: 4,
            noise_std: 0.01,
            square: 4,
            trail: 3,
            trail_decay: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_classes < 2 {
            bail!(Config, "k_classes must be at least 2, got {}", self.k_classes);
        }
        if self.segment_count < 2 {
            bail!(Config, "segment_count must be at least 2, got {}", self.segment_count);
        }
        if self.t_total < 2 * self.segment_count || self.t_total % self.segment_count != 0 {
            bail!(
                Config,
                "t_total {} must be a multiple of segment_count {} with at least 2 frames per segment",
                self.t_total,
                self.segment_count
            );
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            bail!(Config, "frame dimensions must be positive");
        }
        if self.square == 0 || self.square >= self.height || self.square >= self.width {
            bail!(Config, "square side {} must be positive and smaller than the frame", self.square);
        }
        if !(0.0..1.0).contains(&self.trail_decay) {
            bail!(Config, "trail_decay must lie in [0, 1), got {}", self.trail_decay);
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bail!(Config, "noise_std must be finite and non-negative");
        }
        Ok(())
    }

    pub fn segment_len(&self) -> usize {
        self.t_total / self.segment_count
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Ordered motion ids for every class; deterministic in the config.
    ///
    /// Classes come in groups of at least three rotations of one cycle of
    /// distinct motions. A rotation drops exactly one of the cycle's
    /// transitions, so with three or more rotations every motion and every
    /// transition of a class reappears in another class of its group.
    pub fn class_patterns(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let (k, s) = (self.k_classes, self.segment_count);
        if s < 3 || s > MOTIONS.len() {
            bail!(Config, "rotation patterns need 3..={} segments, got {s}", MOTIONS.len());
        }
        let groups = k.div_ceil(s);
        if k < 3 * groups {
            bail!(Config, "{k} classes cannot be split into groups of 3..={s} rotations");
        }
        let mut sizes = vec![k / groups; groups];
        sizes.iter_mut().take(k % groups).for_each(|g| *g += 1);
        let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEARCH_SEED);
        let mut ids: Vec<usize> = (0..MOTIONS.len()).collect();
        'search: for _ in 0..PATTERN_SEARCH_ATTEMPTS {
            let mut out: Vec<Vec<usize>> = Vec::with_capacity(k);
            for &size in &sizes {
                ids.shuffle(&mut rng);
                let cycle = &ids[..s];
                for r in 0..size {
                    let p: Vec<usize> = (0..s).map(|i| cycle[(i + r) % s]).collect();
                    if out.contains(&p) {
                        continue 'search;
                    }
                    out.push(p);
                }
            }
            if patterns_are_ambiguous(&out) {
                return Ok(out);
            }
        }
        bail!(Config, "no label-ambiguous set of {k} patterns found")
    }
}

/// Every motion and every adjacent motion pair used by one pattern is used
/// by at least one other pattern.
pub fn patterns_are_ambiguous(patterns: &[Vec<usize>]) -> bool {
    let shared = |pred: &dyn Fn(&[usize]) -> bool| patterns.iter().filter(|p| pred(p)).count() >= 2;
    patterns.iter().all(|p| {
        p.iter().all(|&m| shared(&|q: &[usize]| q.contains(&m)))
            && p.windows(2).all(|w| shared(&|q: &[usize]| q.windows(2).any(|x| x == w)))
    })
}

/// One labelled video, frames stored `(t, y, x, c)` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Vec<f32>,
    pub t_total: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub label: u32,
    pub seed: u64,
}

impl Video {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * self.channels;
        &self.frames[t * n..(t + 1) * n]
    }
}

/// Per-video seed derived from the corpus seed (SplitMix64 finalizer).
pub fn video_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut z = corpus_seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Renders one video from its own seed. Used by [`generate_corpus`], and
/// directly by parallel generators that shard by index.
pub fn generate_video(cfg: &GeneratorConfig, patterns: &[Vec<usize>], seed: u64) -> Video {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = rng.random_range(0..cfg.k_classes);
    let y0 = rng.random_range(0.0..cfg.height as f64);
    let x0 = cfg.width.saturating_sub(cfg.square) as f64 / 2.0;
    let heading = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("validated std");
    let seg = cfg.segment_len();
    let n = cfg.frame_len();
    let velocity = |t: usize| {
        let (dy, speed) = MOTIONS[patterns[label][t / seg]];
        (dy, heading * speed)
    };
    // pos[k] is the top-left corner at frame k - trail; earlier frames continue the first segment.
    let mut pos = Vec::with_capacity(cfg.t_total + cfg.trail);
    let (vy, vx) = velocity(0);
    for k in 0..cfg.trail {
        let back = (cfg.trail - k) as f64;
        pos.push((y0 - back * vy, x0 - back * vx));
    }
    pos.push((y0, x0));
    for t in 1..cfg.t_total {
        let (y, x) = pos[pos.len() - 1];
        let (vy, vx) = velocity(t - 1);
        pos.push((y + vy, x + vx));
    }
    let mut frames = vec![0f32; cfg.t_total * n];
    let mut rows = vec![0f64; cfg.height];
    let mut cols = vec![0f64; cfg.width];
    let mut intensity = vec![0f64; cfg.height * cfg.width];
    for t in 0..cfg.t_total {
        intensity.iter_mut().for_each(|v| *v = 0.0);
        let mut weight = 1.0;
        for j in 0..=cfg.trail {
            let (y, x) = pos[t + cfg.trail - j];
            band_coverage(y, cfg.square as f64, &mut rows);
            band_coverage(x, cfg.square as f64, &mut cols);
            for (r, &ry) in rows.iter().enumerate() {
                for (c, &cx) in cols.iter().enumerate() {
                    let v = &mut intensity[r * cfg.width + c];
                    *v = v.max(weight * ry * cx);
                }
            }
            weight *= cfg.trail_decay;
        }
        let frame = &mut frames[t * n..(t + 1) * n];
        for (px, &base) in intensity.iter().enumerate() {
            for ch in 0..cfg.channels {
                let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                frame[px * cfg.channels + ch] = (base + eps).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Video {
        frames,
        t_total: cfg.t_total,
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        label: label as u32,
        seed,
    }
}

/// Fraction of each pixel covered by the band `[top, top + size)` on a torus of `out.len()` pixels.
fn band_coverage(top: f64, size: f64, out: &mut [f64]) {
    let h = out.len() as f64;
    let top = top - (top / h).floor() * h;
    for (r, cov) in out.iter_mut().enumerate() {
        let mut total = 0.0;
        // The band may wrap, so test it against the row and its image one period up.
        for shift in [0.0, h] {
            let lo = (r as f64 + shift).max(top);
            let hi = (r as f64 + shift + 1.0).min(top + size);
            if hi > lo {
                total += hi - lo;
            }
        }
        *cov = total.min(1.0);
    }
}

/// Generates `n_videos` videos; video `i` depends only on `(cfg, seed, i)`.
pub fn generate_corpus(cfg: &GeneratorConfig, n_videos: usize, seed: u64) -> Result<Vec<Video>> {
    if n_videos == 0 {
        bail!(Config, "n_videos must be at least 1");
    }
    let patterns = cfg.class_patterns()?;
    Ok((0..n_videos as u64).map(|i| generate_video(cfg, &patterns, video_seed(seed, i))).collect())
}

/// Address of one sampled view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClipSpec {
    pub start: usize,
    pub stride: usize,
    pub length: usize,
}

impl ClipSpec {
    /// Frames covered from first to last sampled frame.
    pub fn span(&self) -> usize {
        span(self.length, self.stride)
    }

    /// Inclusive frame interval.
    pub fn interval(&self) -> (usize, usize) {
        (self.start, self.start + self.span() - 1)
    }

    pub fn frame_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.length).map(move |i| self.start + i * self.stride)
    }

    pub fn validate(&self, t_total: usize) -> Result<()> {
        if self.stride == 0 || self.length == 0 {
            bail!(Index, "clip stride and length must be positive: {self:?}");
        }
        if self.start + self.span() > t_total {
            bail!(Index, "clip {self:?} ends at frame {} of {t_total}", self.interval().1);
        }
        Ok(())
    }
}

pub fn span(length: usize, stride: usize) -> usize {
    (length.max(1) - 1) * stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Independent,
    Included,
    Disjoint,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Independent, Strategy::Included, Strategy::Disjoint];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Independent => "independent",
            Strategy::Included => "included",
            Strategy::Disjoint => "disjoint",
        }
    }
}

impl core::fmt::Display for Strategy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independent" | "random_independent" => Ok(Strategy::Independent),
            "included" | "random_included" => Ok(Strategy::Included),
            "disjoint" | "random_disjoint" => Ok(Strategy::Disjoint),
            other => Err(Error::Config(format!("unknown sampling strategy `{other}`"))),
        }
    }
}

/// Samples a (short, long) clip pair from a video of `t_total` frames.
pub fn sample_pair<R: Rng + ?Sized>(
    t_total: usize,
    length: usize,
    short_stride: usize,
    long_stride: usize,
    strategy: Strategy,
    rng: &mut R,
) -> Result<(ClipSpec, ClipSpec)> {
    let err = |reason: String| Error::Sampling { strategy: strategy.name(), reason };
    if length == 0 || short_stride == 0 || long_stride == 0 {
        return Err(err(String::from("length and strides must be positive")));
    }
    if short_stride > long_stride {
        return Err(err(format!("short stride {short_stride} exceeds long stride {long_stride}")));
    }
    let s_span = span(length, short_stride);
    let l_span = span(length, long_stride);
    if l_span > t_total {
        return Err(err(format!("long span {l_span} exceeds video length {t_total}")));
    }
    let short = |start| ClipSpec { start, stride: short_stride, length };
    let long = |start| ClipSpec { start, stride: long_stride, length };
    match strategy {
        Strategy::Independent => {
            let s = rng.random_range(0..=t_total - s_span);
            let l = rng.random_range(0..=t_total - l_span);
            Ok((short(s), long(l)))
        }
        Strategy::Included => {
            let l = rng.random_range(0..=t_total - l_span);
            let s = rng.random_range(l..=l + l_span - s_span);
            Ok((short(s), long(l)))
        }
        Strategy::Disjoint => {
            if s_span + l_span > t_total {
                return Err(err(format!(
                    "spans {s_span} and {l_span} cannot both fit disjointly in {t_total} frames"
                )));
            }
            for _ in 0..DISJOINT_ATTEMPTS {
                let s = rng.random_range(0..=t_total - s_span);
                let l = rng.random_range(0..=t_total - l_span);
                if s + s_span <= l || l + l_span <= s {
                    return Ok((short(s), long(l)));
                }
            }
            Err(err(format!("no disjoint pair found in {DISJOINT_ATTEMPTS} attempts")))
        }
    }
}

/// Clip tensor `(t, y, x, c)` in row-major order, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Clip {
    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    #[inline]
    fn at_mut(&mut self, t: usize, y: usize, x: usize, c: usize) -> &mut f32 {
        &mut self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Clip whose every frame is a copy of `frame`.
    pub fn constant(frames: usize, height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { frames, height, width, channels, data: vec![value; frames * height * width * channels] }
    }
}

/// Frame `i` of the result is frame `start + i * stride` of the video.
pub fn extract_clip(video: &Video, spec: &ClipSpec) -> Result<Clip> {
    spec.validate(video.t_total)?;
    let mut data = Vec::with_capacity(spec.length * video.height * video.width * video.channels);
    for t in spec.frame_indices() {
        data.extend_from_slice(video.frame(t));
    }
    Ok(Clip { frames: spec.length, height: video.height, width: video.width, channels: video.channels, data })
}

/// Spatial augmentation recipe, drawn once per clip and applied to every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Area fraction range of the random square-aspect crop; `None` disables cropping.
    pub crop_scale: Option<(f64, f64)>,
    pub flip_prob: f64,
    /// Additive brightness offset drawn from `±brightness`.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { crop_scale: Some((0.6, 1.0)), flip_prob: 0.5, brightness: 0.2 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { crop_scale: None, flip_prob: 0.0, brightness: 0.0 }
    }
}

pub fn augment<R: Rng + ?Sized>(clip: &Clip, rng: &mut R, cfg: &AugmentConfig) -> Clip {
    let mut out = match cfg.crop_scale {
        Some((lo, hi)) if lo < 1.0 || hi < 1.0 => {
            let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let side = libm::sqrt(area.clamp(1e-3, 1.0));
            let ch = side * clip.height as f64;
            let cw = side * clip.width as f64;
            let oy = rng.random_range(0.0..=(clip.height as f64 - ch));
            let ox = rng.random_range(0.0..=(clip.width as f64 - cw));
            resize_crop(clip, oy, ox, ch, cw)
        }
        _ => clip.clone(),
    };
    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.min(1.0)) {
        out = flip_horizontal(&out);
    }
    if cfg.brightness > 0.0 {
        let delta = rng.random_range(-cfg.brightness..=cfg.brightness) as f32;
        for v in &mut out.data {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn flip_horizontal(clip: &Clip) -> Clip {
    let mut out = clip.clone();
    for t in 0..clip.frames {
        for y in 0..clip.height {
            for x in 0..clip.width {
                for c in 0..clip.channels {
                    *out.at_mut(t, y, x, c) = clip.at(t, y, clip.width - 1 - x, c);
                }
            }
        }
    }
    out
}

/// Bilinear resampling of the crop window back to the full frame size.
fn resize_crop(clip: &Clip, oy: f64, ox: f64, ch: f64, cw: f64) -> Clip {
    let mut out = clip.clone();
    let (h, w) = (clip.height, clip.width);
    for y in 0..h {
        let sy = (oy + (y as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..w {
            let sx = (ox + (x as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for t in 0..clip.frames {
                for c in 0..clip.channels {
                    let top = clip.at(t, y0, x0, c) * (1.0 - fx) + clip.at(t, y0, x1, c) * fx;
                    let bot = clip.at(t, y1, x0, c) * (1.0 - fx) + clip.at(t, y1, x1, c) * fx;
                    *out.at_mut(t, y, x, c) = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}
