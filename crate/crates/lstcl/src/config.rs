//! Experiment configuration files.
//!
//! Paper-relevant knobs (temperature, momentum, both strides, the sampling
//! strategy and the framework) have no defaults and must be written out in
//! every config. Everything else falls back to the desk-scale defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lstcl_core::backbone::{BackboneConfig, Variant};
use lstcl_core::contrastive::{EncoderConfig, Framework, LossConfig};
use lstcl_core::evaluation::{FinetuneConfig, ProbeConfig};
use lstcl_core::optim::AdamConfig;
use lstcl_core::trainer::{SamplingConfig, TrainConfig};
use lstcl_core::videogen::{AugmentConfig, GeneratorConfig, Strategy};

use crate::error::{CliError, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub k_classes: usize,
    pub t_total: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub segment_count: usize,
    pub noise_std: f64,
    pub square: usize,
    pub trail: usize,
    pub trail_decay: f64,
    pub train_videos: usize,
    pub test_videos: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            k_classes: g.k_classes,
            t_total: g.t_total,
            height: g.height,
            width: g.width,
            channels: g.channels,
            segment_count: g.segment_count,
            noise_std: g.noise_std,
            square: g.square,
            trail: g.trail,
            trail_decay: g.trail_decay,
            train_videos: 500,
            test_videos: 500,
            train_seed: 1,
            test_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    pub frames: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    pub stages: Vec<usize>,
    pub window: [usize; 2],
    pub proj_dim: usize,
    pub head_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneConfig::desk(Variant::DividedSt);
        Self {
            variant: b.variant.name().into(),
            frames: b.frames,
            patch: b.patch,
            dim: b.dim,
            heads: b.heads,
            mlp_ratio: b.mlp_ratio,
            depth: b.depth,
            stages: b.stages.clone(),
            window: [b.window.0, b.window.1],
            proj_dim: 32,
            head_ratio: 4,
        }
    }
}

fn d_epochs() -> usize {
    30
}
fn d_warmup() -> usize {
    6
}
fn d_base_lr() -> f64 {
    0.02
}
fn d_batch() -> usize {
    16
}
fn d_wd() -> f64 {
    0.05
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_true() -> bool {
    true
}
fn d_ckpt_every() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub framework: String,
    pub temperature: f64,
    pub momentum: f64,
    pub short_stride: usize,
    pub long_stride: usize,
    pub strategy: String,
    #[serde(default = "d_true")]
    pub symmetrize: bool,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    /// Scaled by `batch_size / 256` to give the peak rate.
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Epochs between checkpoint writes; the final state is always written.
    #[serde(default = "d_ckpt_every")]
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// `[min, max]` crop area fraction, or `[1.0, 1.0]` to disable cropping.
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    pub brightness: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        let (lo, hi) = a.crop_scale.unwrap_or((1.0, 1.0));
        Self { crop_scale: [lo, hi], flip_prob: a.flip_prob, brightness: a.brightness }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub stride: usize,
    pub clips_per_video: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_eval_clips: usize,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            stride: p.stride,
            clips_per_video: p.clips_per_video,
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
            n_eval_clips: p.n_eval_clips,
            seed: p.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub stride: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub n_eval_clips: usize,
    pub seed: u64,
    /// Start from the pretrained backbone; `false` trains from scratch.
    pub pretrained: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            stride: 2,
            epochs: 10,
            warmup_epochs: 2,
            base_lr: 0.05,
            batch_size: 16,
            weight_decay: 0.05,
            n_eval_clips: 5,
            seed: 0,
            pretrained: true,
        }
    }
}

/// Grid of pretraining settings; every combination is pretrained and probed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub short_strides: Vec<usize>,
    pub long_strides: Vec<usize>,
    pub strategies: Vec<String>,
    pub frameworks: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Everything that determines tensor shapes in a checkpoint.
#[derive(Serialize)]
struct ModelShape<'a> {
    model: &'a ModelSection,
    height: usize,
    width: usize,
    channels: usize,
    k_classes: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn parse_field<T: std::str::FromStr<Err = lstcl_core::Error>>(field: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e| CliError::usage(format!("field `{field}`: {e}")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// SHA-256 over the settings that fix parameter shapes.
    pub fn model_hash(&self) -> String {
        let shape = ModelShape {
            model: &self.model,
            height: self.corpus.height,
            width: self.corpus.width,
            channels: self.corpus.channels,
            k_classes: self.corpus.k_classes,
        };
        sha256_hex(toml::to_string(&shape).expect("shape serializes").as_bytes())
    }

    /// Replaces the pretraining, probe and finetuning seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pretrain.seed = seed;
        self.probe.seed = seed;
        self.finetune.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator().validate()?;
        if self.corpus.train_videos == 0 || self.corpus.test_videos == 0 {
            return Err(CliError::usage("corpus.train_videos and corpus.test_videos must be positive"));
        }
        let train = self.train()?;
        train.validate()?;
        check_strides(&train.sampling, self.corpus.t_total)?;
        crate::pipeline::encoder(self)?;
        self.finetune_config().validate()?;
        let p = &self.probe;
        if p.stride == 0 || p.clips_per_video == 0 || p.batch_size == 0 || p.n_eval_clips == 0 {
            return Err(CliError::usage("probe stride, clips_per_video, batch_size and n_eval_clips must be positive"));
        }
        if let Some(s) = &self.sweep {
            s.points(self)?;
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        let c = &self.corpus;
        GeneratorConfig {
            k_classes: c.k_classes,
            t_total: c.t_total,
            height: c.height,
            width: c.width,
            channels: c.channels,
            segment_count: c.segment_count,
            noise_std: c.noise_std,
            square: c.square,
            trail: c.trail,
            trail_decay: c.trail_decay,
        }
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let m = &self.model;
        Ok(BackboneConfig {
            variant: parse_field("model.variant", &m.variant)?,
            frames: m.frames,
            height: self.corpus.height,
            width: self.corpus.width,
            channels: self.corpus.channels,
            patch: m.patch,
            dim: m.dim,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            depth: m.depth,
            stages: m.stages.clone(),
            window: (m.window[0], m.window[1]),
        })
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig { backbone: self.backbone()?, proj_dim: self.model.proj_dim, head_ratio: self.model.head_ratio })
    }

    pub fn augment_config(&self) -> AugmentConfig {
        let a = &self.augment;
        let [lo, hi] = a.crop_scale;
        AugmentConfig {
            crop_scale: (lo < 1.0 || hi < 1.0).then_some((lo, hi)),
            flip_prob: a.flip_prob,
            brightness: a.brightness,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let p = &self.pretrain;
        Ok(TrainConfig {
            epochs: p.epochs,
            warmup_epochs: p.warmup_epochs,
            base_lr: p.base_lr,
            batch_size: p.batch_size,
            seed: p.seed,
            adam: AdamConfig { beta1: p.beta1, beta2: p.beta2, eps: p.eps, weight_decay: p.weight_decay },
            loss: LossConfig {
                framework: parse_field("pretrain.framework", &p.framework)?,
                temperature: p.temperature,
                momentum: p.momentum,
                symmetrize: p.symmetrize,
            },
            sampling: SamplingConfig {
                frames: self.model.frames,
                short_stride: p.short_stride,
                long_stride: p.long_stride,
                strategy: parse_field("pretrain.strategy", &p.strategy)?,
            },
            augment: self.augment_config(),
        })
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            stride: p.stride,
            clips_per_video: p.clips_per_video,
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
            seed: p.seed,
            adam: AdamConfig { weight_decay: 0.0, ..AdamConfig::default() },
            n_eval_clips: p.n_eval_clips,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            stride: f.stride,
            epochs: f.epochs,
            warmup_epochs: f.warmup_epochs,
            base_lr: f.base_lr,
            batch_size: f.batch_size,
            seed: f.seed,
            adam: AdamConfig { weight_decay: f.weight_decay, ..AdamConfig::default() },
            augment: self.augment_config(),
            n_eval_clips: f.n_eval_clips,
        }
    }
}

/// Both views of a pair must fit inside one video.
fn check_strides(s: &SamplingConfig, t_total: usize) -> Result<()> {
    let mut rng = lstcl_core::trainer::stream_rng(0, 0, 0, 0);
    lstcl_core::videogen::sample_pair(t_total, s.frames, s.short_stride, s.long_stride, s.strategy, &mut rng)
        .map(|_| ())
        .map_err(|e| CliError::usage(format!("strides {}/{} do not fit {t_total}-frame videos: {e}", s.short_stride, s.long_stride)))
}

/// One cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub short_stride: usize,
    pub long_stride: usize,
    pub strategy: Strategy,
    pub framework: Framework,
    pub seed: u64,
}

impl SweepSection {
    /// Every grid point, each checked against the base config.
    pub fn points(&self, base: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
        for (name, len) in [
            ("short_strides", self.short_strides.len()),
            ("long_strides", self.long_strides.len()),
            ("strategies", self.strategies.len()),
            ("frameworks", self.frameworks.len()),
            ("seeds", self.seeds.len()),
        ] {
            if len == 0 {
                return Err(CliError::usage(format!("sweep axis `{name}` is empty")));
            }
        }
        let mut out = Vec::new();
        for &short_stride in &self.short_strides {
            for &long_stride in &self.long_strides {
                for s in &self.strategies {
                    for f in &self.frameworks {
                        for &seed in &self.seeds {
                            let point = SweepPoint {
                                short_stride,
                                long_stride,
                                strategy: parse_field("sweep.strategies", s)?,
                                framework: parse_field("sweep.frameworks", f)?,
                                seed,
                            };
                            let train = point.apply(base).train()?;
                            train.validate()?;
                            check_strides(&train.sampling, base.corpus.t_total)?;
                            out.push(point);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl SweepPoint {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone().with_seed(self.seed);
        cfg.pretrain.short_stride = self.short_stride;
        cfg.pretrain.long_stride = self.long_stride;
        cfg.pretrain.strategy = self.strategy.name().into();
        cfg.pretrain.framework = self.framework.name().into();
        cfg.sweep = None;
        cfg
    }
}
