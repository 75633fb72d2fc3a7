//! Linear probing, supervised finetuning and multi-clip video inference.
//!
//! Clips for inference cover the full frame, so the spatial center crop of
//! the protocol is the identity here.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{init_linear, linear, Backbone};
use crate::contrastive::BACKBONE;
use crate::error::{bail, Result};
use crate::exec::BatchExecutor;
use crate::optim::{lr_at, optimizer_step, AdamConfig, AdamState};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::trainer::{epoch_order, stream, stream_rng};
use crate::videogen::{augment, extract_clip, span, AugmentConfig, Clip, ClipSpec, Video};

pub const HEAD: &str = "head";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    /// Accuracy per class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub n_videos: usize,
    pub n_clips: usize,
    pub frames: usize,
    pub stride: usize,
}

/// Linear classifier `(dim -> k)` named `head.w`, `head.b`.
pub fn init_head<F: Real, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, dim: usize, k: usize) {
    init_linear(&mut Init { store, rng }, HEAD, dim, k);
}

pub fn head_logits<F: Real>(g: &mut Graph<F>, p: &mut Binder<'_, F>, features: Var) -> Result<Var> {
    linear(g, p, HEAD, features)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `n_clips` evenly spaced starts over every valid start; one clip sits in the middle.
pub fn clip_starts(t_total: usize, frames: usize, stride: usize, n_clips: usize) -> Result<Vec<usize>> {
    if n_clips == 0 || frames == 0 || stride == 0 {
        bail!(Protocol, "need at least one clip of at least one frame at a positive stride");
    }
    let s = span(frames, stride);
    if s > t_total {
        bail!(Protocol, "a {frames}-frame clip at stride {stride} spans {s} frames, video has {t_total}");
    }
    let last = t_total - s;
    if n_clips == 1 {
        return Ok(vec![last / 2]);
    }
    Ok((0..n_clips).map(|i| (i * last + (n_clips - 1) / 2) / (n_clips - 1)).collect())
}

/// Mean of the per-clip class probabilities from `score`.
pub fn aggregate_inference(
    score: impl Fn(&Clip) -> Result<Vec<f64>>,
    video: &Video,
    n_clips: usize,
    frames: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    // Running mean: identical clip scores average to themselves exactly.
    let mut mean: Vec<f64> = Vec::new();
    for (i, start) in clip_starts(video.t_total, frames, stride, n_clips)?.into_iter().enumerate() {
        let p = score(&extract_clip(video, &ClipSpec { start, stride, length: frames })?)?;
        if mean.is_empty() {
            mean = vec![0.0; p.len()];
        } else if p.len() != mean.len() {
            bail!(Shape, "clip scores change length from {} to {}", mean.len(), p.len());
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += (v - *m) / (i + 1) as f64;
        }
    }
    Ok(mean)
}

/// Video-level accuracy of `score` under [`aggregate_inference`].
pub fn evaluate<E: BatchExecutor>(
    score: &(dyn Fn(&Clip) -> Result<Vec<f64>> + Sync),
    videos: &[Video],
    k_classes: usize,
    n_clips: usize,
    frames: usize,
    stride: usize,
    exec: &E,
) -> Result<EvalReport> {
    let preds = exec.map(videos.len(), |i| aggregate_inference(score, &videos[i], n_clips, frames, stride).map(|p| argmax(&p)));
    let mut hits = vec![0usize; k_classes];
    let mut counts = vec![0usize; k_classes];
    for (v, p) in videos.iter().zip(preds) {
        let p = p?;
        let label = v.label as usize;
        if label >= k_classes {
            bail!(Config, "label {label} outside {k_classes} classes");
        }
        counts[label] += 1;
        hits[label] += (p == label) as usize;
    }
    let n = videos.len();
    Ok(EvalReport {
        top1: if n == 0 { 0.0 } else { hits.iter().sum::<usize>() as f64 / n as f64 },
        per_class: hits.iter().zip(&counts).map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64)).collect(),
        n_videos: n,
        n_clips,
        frames,
        stride,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Temporal stride of probe training and inference clips.
    pub stride: usize,
    /// Random clips per training video whose features are cached.
    pub clips_per_video: usize,
    pub epochs: usize,
    /// Initial rate, decayed to zero on a cosine schedule.
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub n_eval_clips: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            clips_per_video: 16,
            epochs: 20,
            lr: 1e-2,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig { weight_decay: 0.0, ..AdamConfig::default() },
            n_eval_clips: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult<F> {
    pub head: ParamStore<F>,
    pub train: EvalReport,
    pub test: EvalReport,
}

fn random_clip<R: Rng>(video: &Video, frames: usize, stride: usize, rng: &mut R) -> Result<Clip> {
    let s = span(frames, stride);
    if s > video.t_total {
        bail!(Protocol, "a {frames}-frame clip at stride {stride} does not fit {} frames", video.t_total);
    }
    let start = rng.random_range(0..=video.t_total - s);
    extract_clip(video, &ClipSpec { start, stride, length: frames })
}

fn check_labels(videos: &[Video], k: usize) -> Result<()> {
    if let Some(v) = videos.iter().find(|v| v.label as usize >= k) {
        bail!(Config, "label {} does not fit a {k}-class head", v.label);
    }
    Ok(())
}

/// Per-column mean and standard deviation, with constant columns given unit scale.
fn feature_stats<F: Real>(x: &Tensor<F>) -> (Vec<f64>, Vec<f64>) {
    let (n, dim) = x.shape();
    let mut mean = vec![0.0; dim];
    let mut scale = vec![0.0; dim];
    for d in 0..dim {
        let m = (0..n).map(|i| x.get(i, d).as_f64()).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| x.get(i, d).as_f64() - m).map(|e| e * e).sum::<f64>() / n as f64;
        let sd = libm::sqrt(var);
        mean[d] = m;
        scale[d] = if sd > 1e-6 { sd } else { 1.0 };
    }
    (mean, scale)
}

/// Head on raw features equal to `head` applied to `(x - mean) / scale`.
fn fold_standardization<F: Real>(head: &ParamStore<F>, mean: &[f64], scale: &[f64]) -> Result<ParamStore<F>> {
    let w = head.get("head.w")?;
    let b = head.get("head.b")?;
    let folded_w = Tensor::from_fn(w.rows(), w.cols(), |d, c| F::of(w.get(d, c).as_f64() / scale[d]));
    let folded_b = Tensor::from_fn(1, w.cols(), |_, c| {
        F::of(b.get(0, c).as_f64() - (0..w.rows()).map(|d| w.get(d, c).as_f64() * mean[d] / scale[d]).sum::<f64>())
    });
    let mut out = ParamStore::new();
    out.insert("head.w", folded_w);
    out.insert("head.b", folded_b);
    Ok(out)
}

/// Trains only a linear head on frozen `features` of random training clips,
/// then reports multi-clip accuracy on both splits.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe_with<F: Real, E: BatchExecutor>(
    features: &(dyn Fn(&Clip) -> Result<Vec<F>> + Sync),
    dim: usize,
    frames: usize,
    train: &[Video],
    test: &[Video],
    k_classes: usize,
    cfg: &ProbeConfig,
    exec: &E,
) -> Result<ProbeResult<F>> {
    if train.is_empty() || cfg.clips_per_video == 0 || cfg.batch_size == 0 {
        bail!(Config, "probe needs training videos, clips and a positive batch size");
    }
    check_labels(train, k_classes)?;
    check_labels(test, k_classes)?;
    let n = train.len() * cfg.clips_per_video;
    let rows = exec.map(n, |i| -> Result<Vec<F>> {
        let (v, c) = (i / cfg.clips_per_video, i % cfg.clips_per_video);
        let mut rng = stream_rng(cfg.seed, stream::PROBE, v as u64, c as u64);
        let f = features(&random_clip(&train[v], frames, cfg.stride, &mut rng)?)?;
        if f.len() != dim {
            bail!(Shape, "feature of width {} for a {dim}-wide head", f.len());
        }
        Ok(f)
    });
    let mut x = Tensor::<F>::zeros(n, dim);
    for (i, r) in rows.into_iter().enumerate() {
        x.row_mut(i).copy_from_slice(&r?);
    }
    let y: Vec<usize> = (0..n).map(|i| train[i / cfg.clips_per_video].label as usize).collect();

    // The head trains on standardized features; the scaling is folded back
    // into it afterwards, so the returned head reads raw features.
    let (mean, scale) = feature_stats(&x);
    let z = Tensor::from_fn(n, dim, |i, d| F::of((x.get(i, d).as_f64() - mean[d]) / scale[d]));
    let mut head = ParamStore::new();
    init_head(&mut head, &mut stream_rng(cfg.seed, stream::PROBE, u64::MAX, 0), dim, k_classes);
    let mut adam = AdamState::new(&head);
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, stream::PROBE, epoch, n);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let mut p = Binder::trainable(&head);
            let xb = g.constant(z.select_rows(batch));
            let logits = head_logits(&mut g, &mut p, xb)?;
            let targets: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            let loss = g.scale(loss, F::of(1.0 / batch.len() as f64));
            let grads = p.collect(&g, &g.backward(loss)?);
            let lr = lr_at(epoch * per_epoch + b, total, 0, cfg.lr)?;
            optimizer_step(&mut head, &grads, &mut adam, &cfg.adam, lr)?;
        }
    }
    let head = fold_standardization(&head, &mean, &scale)?;
    let score = |clip: &Clip| -> Result<Vec<f64>> {
        let f = features(clip)?;
        let w = head.get("head.w")?;
        let b = head.get("head.b")?;
        let logits: Vec<f64> = (0..k_classes)
            .map(|c| b.get(0, c).as_f64() + f.iter().enumerate().map(|(d, v)| v.as_f64() * w.get(d, c).as_f64()).sum::<f64>())
            .collect();
        Ok(softmax(&logits))
    };
    let train_report = evaluate(&score, train, k_classes, cfg.n_eval_clips, frames, cfg.stride, exec)?;
    let test_report = evaluate(&score, test, k_classes, cfg.n_eval_clips, frames, cfg.stride, exec)?;
    Ok(ProbeResult { head, train: train_report, test: test_report })
}

/// [`linear_probe_with`] on the features of a frozen backbone stored under `prefix`.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe<F: Real, E: BatchExecutor>(
    backbone: &Backbone,
    params: &ParamStore<F>,
    prefix: &str,
    train: &[Video],
    test: &[Video],
    k_classes: usize,
    cfg: &ProbeConfig,
    exec: &E,
) -> Result<ProbeResult<F>> {
    let features = |clip: &Clip| backbone.features(params, prefix, clip);
    let frames = backbone.config().frames;
    linear_probe_with(&features, backbone.out_dim(), frames, train, test, k_classes, cfg, exec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub stride: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub n_eval_clips: usize,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stride == 0 {
            bail!(Config, "finetuning needs a positive batch size and stride");
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            bail!(Config, "warm-up of {} epochs must be shorter than {} epochs", self.warmup_epochs, self.epochs);
        }
        self.adam.validate()
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult<F> {
    /// Backbone under `backbone.*` and the classifier under `head.*`.
    pub params: ParamStore<F>,
    pub report: EvalReport,
    pub steps: usize,
    /// Mean training loss of every step.
    pub losses: Vec<f64>,
}

/// Supervised end-to-end training of backbone and head. `init` provides
/// starting `backbone.*` tensors; without it the backbone starts from a
/// seeded random initialization.
#[allow(clippy::too_many_arguments)]
pub fn finetune<F: Real, E: BatchExecutor>(
    backbone: &Backbone,
    init: Option<&ParamStore<F>>,
    train: &[Video],
    test: &[Video],
    k_classes: usize,
    cfg: &FinetuneConfig,
    exec: &E,
) -> Result<FinetuneResult<F>> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(Config, "finetuning needs training videos");
    }
    check_labels(train, k_classes)?;
    check_labels(test, k_classes)?;
    let frames = backbone.config().frames;
    let mut params: ParamStore<F> = match init {
        Some(store) => {
            let bb = store.with_prefix(&format!("{BACKBONE}."));
            let fresh: ParamStore<F> = backbone.init_store(&mut stream_rng(cfg.seed, stream::FINETUNE, 0, 0), BACKBONE);
            if bb.len() != fresh.len() || fresh.iter().any(|(k, t)| bb.get(k).map(|b| b.shape()) != Ok(t.shape())) {
                bail!(ParamMap, "initial parameters do not match the backbone");
            }
            bb
        }
        None => backbone.init_store(&mut stream_rng(cfg.seed, stream::FINETUNE, 0, 0), BACKBONE),
    };
    init_head(&mut params, &mut stream_rng(cfg.seed, stream::FINETUNE, 1, 0), backbone.out_dim(), k_classes);
    let mut adam = AdamState::new(&params);
    let n = train.len();
    let spe = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * spe;
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let (epoch, batch) = (step / spe, step % spe);
        let order = epoch_order(cfg.seed, stream::FINETUNE, epoch, n);
        let idx = &order[batch * cfg.batch_size..((batch + 1) * cfg.batch_size).min(n)];
        let scale = F::of(1.0 / idx.len() as f64);
        let per_sample = exec.map(idx.len(), |slot| -> Result<(f64, ParamStore<F>)> {
            let mut rng = stream_rng(cfg.seed, stream::FINETUNE, 2 + step as u64, slot as u64);
            let video = &train[idx[slot]];
            let clip = augment(&random_clip(video, frames, cfg.stride, &mut rng)?, &mut rng, &cfg.augment);
            let mut g = Graph::new();
            let mut p = Binder::trainable(&params);
            let x = g.constant(backbone.patches(&clip)?);
            let f = backbone.forward(&mut g, &mut p, BACKBONE, x)?;
            let logits = head_logits(&mut g, &mut p, f)?;
            let loss = g.cross_entropy(logits, &[video.label as usize])?;
            let loss = g.scale(loss, scale);
            Ok((g.value(loss).item().as_f64(), p.collect(&g, &g.backward(loss)?)))
        });
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for r in per_sample {
            let (l, g) = r?;
            loss += l;
            grads.accumulate(&g)?;
        }
        if !loss.is_finite() || !grads.is_finite() {
            bail!(Numeric, "non-finite finetuning loss at step {step}");
        }
        let lr = lr_at(step, total, cfg.warmup_epochs * spe, cfg.peak_lr())?;
        optimizer_step(&mut params, &grads, &mut adam, &cfg.adam, lr)?;
        losses.push(loss);
    }
    let report = evaluate_classifier(backbone, &params, test, k_classes, cfg.n_eval_clips, cfg.stride, exec)?;
    Ok(FinetuneResult { params, report, steps: total, losses })
}

/// Class probabilities of a backbone-plus-head classifier for one clip.
pub fn classifier_scores<F: Real>(backbone: &Backbone, params: &ParamStore<F>, clip: &Clip) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut p = Binder::frozen(params);
    let x = g.constant(backbone.patches(clip)?);
    let f = backbone.forward(&mut g, &mut p, BACKBONE, x)?;
    let logits = head_logits(&mut g, &mut p, f)?;
    Ok(softmax(&g.value(logits).data().iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
}

/// Multi-clip evaluation of a classifier holding `backbone.*` and `head.*`.
pub fn evaluate_classifier<F: Real, E: BatchExecutor>(
    backbone: &Backbone,
    params: &ParamStore<F>,
    videos: &[Video],
    k_classes: usize,
    n_clips: usize,
    stride: usize,
    exec: &E,
) -> Result<EvalReport> {
    check_labels(videos, k_classes)?;
    let score = |clip: &Clip| classifier_scores(backbone, params, clip);
    evaluate(&score, videos, k_classes, n_clips, backbone.config().frames, stride, exec)
}
