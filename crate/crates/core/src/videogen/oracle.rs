//! Brute-force check that short windows are label-ambiguous while whole
//! videos are not.
//!
//! The check does not use any learned video model. It tracks the square with
//! a circular intensity centroid, quantizes frame-to-frame displacements to
//! the motion vocabulary, and fits a multinomial logistic regression on
//! handcrafted histograms: once per short window and once per whole video.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use super::{GeneratorConfig, Video, MOTIONS};
use crate::error::{bail, Result};

const WINDOWS_PER_VIDEO: usize = 8;
const FIT_ITERS: usize = 400;
const FIT_LR: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmbiguityReport {
    /// Training accuracy of the window-level classifier.
    pub window_accuracy: f64,
    /// Training accuracy of the whole-video classifier.
    pub video_accuracy: f64,
    pub window_len: usize,
}

impl AmbiguityReport {
    pub fn holds(&self) -> bool {
        self.window_accuracy < 1.0 && self.video_accuracy == 1.0
    }
}

/// Circular intensity centroid `(row, column)` of frame `t`, in pixels.
pub fn centroid(video: &Video, t: usize) -> (f64, f64) {
    let (h, w, c) = (video.height, video.width, video.channels);
    let frame = video.frame(t);
    let mut rows = vec![0.0; h];
    let mut cols = vec![0.0; w];
    for r in 0..h {
        for x in 0..w {
            let v: f64 = frame[(r * w + x) * c..(r * w + x + 1) * c].iter().map(|&v| v as f64).sum();
            rows[r] += v;
            cols[x] += v;
        }
    }
    (circular_mean(&rows), circular_mean(&cols))
}

fn circular_mean(mass: &[f64]) -> f64 {
    let n = mass.len() as f64;
    let (mut s, mut co) = (0.0, 0.0);
    for (i, &m) in mass.iter().enumerate() {
        let angle = 2.0 * PI * i as f64 / n;
        s += m * angle.sin();
        co += m * angle.cos();
    }
    s.atan2(co) * n / (2.0 * PI)
}

fn wrap(d: f64, period: usize) -> f64 {
    let p = period as f64;
    d - (d / p).round() * p
}

/// Motion id nearest to the displacement between frames `t` and `t + 1`;
/// the horizontal direction is ignored.
pub fn motion_between(video: &Video, t: usize) -> usize {
    let (y0, x0) = centroid(video, t);
    let (y1, x1) = centroid(video, t + 1);
    let dy = wrap(y1 - y0, video.height);
    let dx = wrap(x1 - x0, video.width).abs();
    let dist = |&(my, mx): &(f64, f64)| (my - dy).powi(2) + (mx - dx).powi(2);
    MOTIONS
        .iter()
        .enumerate()
        .min_by(|a, b| dist(a.1).partial_cmp(&dist(b.1)).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// Motion histogram plus bigram histogram over frames `start..start + len`.
fn window_features(motions: &[usize], start: usize, len: usize) -> Vec<f64> {
    let v = MOTIONS.len();
    let mut f = vec![0.0; v + v * v];
    let pairs = &motions[start..start + len - 1];
    for &m in pairs {
        f[m] += 1.0 / pairs.len() as f64;
    }
    for w in pairs.windows(2) {
        f[v + w[0] * v + w[1]] += 1.0 / (pairs.len() - 1).max(1) as f64;
    }
    f
}

/// Per-segment motion histograms, concatenated.
fn video_features(motions: &[usize], cfg: &GeneratorConfig) -> Vec<f64> {
    let v = MOTIONS.len();
    let seg = cfg.segment_len();
    let mut f = vec![0.0; v * cfg.segment_count];
    for s in 0..cfg.segment_count {
        let inside = &motions[s * seg..s * seg + seg - 1];
        for &m in inside {
            f[s * v + m] += 1.0 / inside.len() as f64;
        }
    }
    f
}

/// Fits softmax regression by full-batch gradient descent and returns the
/// training accuracy.
fn logistic_accuracy(x: &[Vec<f64>], y: &[usize], classes: usize) -> f64 {
    let d = x[0].len() + 1;
    let n = x.len() as f64;
    let mut w = vec![0.0; classes * d];
    let mut grad = vec![0.0; classes * d];
    let mut p = vec![0.0; classes];
    let logits = |w: &[f64], xi: &[f64], out: &mut [f64]| {
        for (k, o) in out.iter_mut().enumerate() {
            let row = &w[k * d..(k + 1) * d];
            *o = row[d - 1] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
        }
    };
    for _ in 0..FIT_ITERS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (xi, &yi) in x.iter().zip(y) {
            logits(&w, xi, &mut p);
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = p.iter_mut().map(|z| {
                *z = (*z - max).exp();
                *z
            }).sum();
            for k in 0..classes {
                let err = p[k] / total - if k == yi { 1.0 } else { 0.0 };
                let row = &mut grad[k * d..(k + 1) * d];
                for (g, &xv) in row.iter_mut().zip(xi) {
                    *g += err * xv;
                }
                row[d - 1] += err;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= FIT_LR * g / n;
        }
    }
    let correct = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            logits(&w, xi, &mut p);
            let best = (0..classes).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
            best == yi
        })
        .count();
    correct as f64 / n
}

/// Runs both classifiers on `videos` with windows of `window_len` frames at stride 1.
pub fn ambiguity_check(videos: &[Video], cfg: &GeneratorConfig, window_len: usize) -> Result<AmbiguityReport> {
    if videos.is_empty() {
        bail!(Config, "ambiguity check needs at least one video");
    }
    if window_len < 3 || window_len > cfg.t_total {
        bail!(Config, "window length {window_len} must be in 3..={}", cfg.t_total);
    }
    let mut wx = Vec::new();
    let mut wy = Vec::new();
    let mut vx = Vec::new();
    let mut vy = Vec::new();
    let last_start = cfg.t_total - window_len;
    for v in videos {
        let motions: Vec<usize> = (0..v.t_total - 1).map(|t| motion_between(v, t)).collect();
        for i in 0..WINDOWS_PER_VIDEO {
            let start = i * last_start / (WINDOWS_PER_VIDEO - 1);
            wx.push(window_features(&motions, start, window_len));
            wy.push(v.label as usize);
        }
        vx.push(video_features(&motions, cfg));
        vy.push(v.label as usize);
    }
    Ok(AmbiguityReport {
        window_accuracy: logistic_accuracy(&wx, &wy, cfg.k_classes),
        video_accuracy: logistic_accuracy(&vx, &vy, cfg.k_classes),
        window_len,
    })
}
