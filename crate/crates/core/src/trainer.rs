//! Contrastive pretraining loop.
//!
//! Every source of randomness is a pure function of the seed and the global
//! step: the epoch's shuffle is seeded by `(seed, epoch)` and each sample's
//! view sampling and augmentation by `(seed, step, slot)`. Resuming from a
//! saved [`TrainState`] therefore needs no generator state.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{momentum_update, symmetrized_step, Encoder, LossConfig, Reduction, StepParams};
use crate::error::{bail, Error, Result};
use crate::exec::BatchExecutor;
use crate::optim::{lr_at, optimizer_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::videogen::{augment, extract_clip, sample_pair, video_seed, AugmentConfig, Strategy, Video};

/// Tags separating the random streams derived from one seed.
pub(crate) mod stream {
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const FINETUNE: u64 = 0x4649_4e45;
}

/// Seed of the random stream `(seed, tag, a, b)`.
pub fn stream_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    video_seed(video_seed(video_seed(seed, tag), a), b)
}

pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, a, b))
}

/// How the two views of a video are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingConfig {
    /// Frames per clip `T`.
    pub frames: usize,
    pub short_stride: usize,
    pub long_stride: usize,
    pub strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Learning rate before the `batch_size / 256` scaling.
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub sampling: SamplingConfig,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            bail!(Config, "warm-up of {} epochs must be shorter than {} epochs", self.warmup_epochs, self.epochs);
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            bail!(Config, "base learning rate must be finite and non-negative");
        }
        let s = &self.sampling;
        if s.frames == 0 || s.short_stride == 0 || s.long_stride == 0 {
            bail!(Config, "clip length and strides must be positive");
        }
        self.adam.validate()?;
        self.loss.validate()
    }

    /// `base_lr * batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn steps_per_epoch(&self, n_videos: usize) -> usize {
        n_videos.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_videos: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_videos)
    }

    pub fn warmup_steps(&self, n_videos: usize) -> usize {
        self.warmup_epochs * self.steps_per_epoch(n_videos)
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F> {
    pub online: ParamStore<F>,
    /// Key encoder for frameworks that keep one.
    pub momentum: Option<ParamStore<F>>,
    pub adam: AdamState<F>,
    /// Optimizer steps completed.
    pub step: u64,
}

impl<F: Real> TrainState<F> {
    /// Seeded initialization; the momentum copy starts as an exact clone.
    pub fn init(enc: &Encoder, cfg: &TrainConfig) -> Self {
        let online = enc.init_online(&mut stream_rng(cfg.seed, stream::INIT, 0, 0));
        let momentum = cfg.loss.framework.uses_momentum().then(|| Encoder::key_params(&online));
        let adam = AdamState::new(&online);
        Self { online, momentum, adam, step: 0 }
    }

    /// Single fingerprint over every stored tensor and the step.
    pub fn checksum(&self) -> u64 {
        let mut h = self.online.checksum();
        if let Some(m) = &self.momentum {
            h = video_seed(h, m.checksum());
        }
        video_seed(video_seed(video_seed(h, self.adam.m.checksum()), self.adam.v.checksum()), self.step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Index of the step just taken, from 0.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Observer called after every optimizer step.
pub trait TrainHooks<F> {
    fn on_step(&mut self, record: &StepRecord, state: &TrainState<F>) -> Result<Control>;
}

impl<F> TrainHooks<F> for () {
    fn on_step(&mut self, _: &StepRecord, _: &TrainState<F>) -> Result<Control> {
        Ok(Control::Continue)
    }
}

impl<F> TrainHooks<F> for Vec<StepRecord> {
    fn on_step(&mut self, record: &StepRecord, _: &TrainState<F>) -> Result<Control> {
        self.push(*record);
        Ok(Control::Continue)
    }
}

/// Checks the sampling settings against the corpus before any work.
pub fn check_feasible(corpus: &[Video], enc: &Encoder, s: &SamplingConfig) -> Result<()> {
    let Some(first) = corpus.first() else {
        bail!(Config, "corpus is empty");
    };
    if corpus.iter().any(|v| v.t_total != first.t_total) {
        bail!(Config, "corpus videos differ in length");
    }
    if s.frames != enc.backbone.config().frames {
        bail!(Config, "clips of {} frames for a backbone of {} frames", s.frames, enc.backbone.config().frames);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    sample_pair(first.t_total, s.frames, s.short_stride, s.long_stride, s.strategy, &mut rng)
        .map(|_| ())
        .map_err(|e| Error::Config(alloc::format!("infeasible strides for {}-frame videos: {e}", first.t_total)))
}

/// Augmented short and long views of `video` as patch rows.
pub fn make_views<F: Real>(
    enc: &Encoder,
    video: &Video,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let s = &cfg.sampling;
    let (short, long) = sample_pair(video.t_total, s.frames, s.short_stride, s.long_stride, s.strategy, rng)?;
    let short = augment(&extract_clip(video, &short)?, rng, &cfg.augment);
    let long = augment(&extract_clip(video, &long)?, rng, &cfg.augment);
    Ok((enc.backbone.patches(&short)?, enc.backbone.patches(&long)?))
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(seed: u64, tag: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, tag, epoch as u64, 0));
    order
}

/// Runs pretraining from `state.step` to the end of the schedule, or until a
/// hook asks to stop.
pub fn pretrain<F: Real, E: BatchExecutor, H: TrainHooks<F>>(
    enc: &Encoder,
    corpus: &[Video],
    cfg: &TrainConfig,
    mut state: TrainState<F>,
    exec: &E,
    hooks: &mut H,
) -> Result<TrainState<F>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(state);
    }
    check_feasible(corpus, enc, &cfg.sampling)?;
    if cfg.loss.framework.uses_momentum() != state.momentum.is_some() {
        bail!(Config, "training state does not match the {} framework", cfg.loss.framework);
    }
    let n = corpus.len();
    let spe = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);
    let warmup = cfg.warmup_steps(n);
    let mut order: Option<(usize, Vec<usize>)> = None;
    while (state.step as usize) < total {
        let step = state.step as usize;
        let (epoch, batch) = (step / spe, step % spe);
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(cfg.seed, stream::SHUFFLE, epoch, n)));
        }
        let idx = &order.as_ref().unwrap().1[batch * cfg.batch_size..((batch + 1) * cfg.batch_size).min(n)];
        let views = exec.map(idx.len(), |slot| {
            let mut rng = stream_rng(cfg.seed, stream::SAMPLE, step as u64, slot as u64);
            make_views::<F>(enc, &corpus[idx[slot]], cfg, &mut rng)
        });
        let (short, long): (Vec<_>, Vec<_>) = views.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
        let params = StepParams { online: &state.online, momentum: state.momentum.as_ref() };
        let out = symmetrized_step(enc, params, &short, &long, &cfg.loss, Reduction::Mean, exec)?;
        if !out.loss.is_finite() || !out.grads.is_finite() {
            bail!(Numeric, "non-finite loss or gradient at step {step}");
        }
        let lr = lr_at(step, total, warmup, cfg.peak_lr())?;
        optimizer_step(&mut state.online, &out.grads, &mut state.adam, &cfg.adam, lr)?;
        if let Some(m) = state.momentum.as_mut() {
            momentum_update(&state.online, m, cfg.loss.momentum)?;
        }
        if !state.online.is_finite() {
            bail!(Numeric, "parameters became non-finite at step {step}");
        }
        state.step += 1;
        let record = StepRecord { step: step as u64, epoch, lr, loss: out.loss };
        if hooks.on_step(&record, &state)? == Control::Stop {
            break;
        }
    }
    Ok(state)
}
