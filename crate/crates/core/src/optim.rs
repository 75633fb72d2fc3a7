//! AdamW with a linear warm-up and cosine decay schedule.

use crate::error::{bail, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            bail!(Config, "invalid optimizer settings {self:?}");
        }
        Ok(())
    }
}

/// First and second moments mirroring the parameter store, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// Learning rate at `step`: `peak (step + 1) / warmup` during warm-up, then
/// `peak (1 + cos(pi (step - warmup) / (total - warmup))) / 2`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> Result<f64> {
    if warmup >= total {
        bail!(Config, "warm-up of {warmup} steps must be shorter than {total} total steps");
    }
    if step > total {
        bail!(Config, "step {step} beyond {total} total steps");
    }
    if step < warmup {
        return Ok(peak * (step + 1) as f64 / warmup as f64);
    }
    let phase = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * phase)))
}

/// One decoupled-weight-decay Adam update:
/// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)`.
pub fn optimizer_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &ParamStore<F>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        bail!(Config, "learning rate must be non-negative, got {lr}");
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        bail!(ParamMap, "parameters, gradients and moments must share one name set");
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (nb1, nb2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
    let (lr_f, decay, eps) = (F::of(lr), F::of(lr * cfg.weight_decay), F::of(cfg.eps));
    let (inv_c1, inv_c2) = (F::of(1.0 / c1), F::of(1.0 / c2));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let m = state.m.get_mut(name);
        let v = state.v.get_mut(name);
        let (Some(m), Some(v)) = (m, v) else {
            bail!(ParamMap, "no optimizer moments for `{name}`");
        };
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            bail!(ParamMap, "`{name}` shape mismatch between parameter, gradient and moments");
        }
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((x, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + nb1 * gi;
            *vi = b2 * *vi + nb2 * gi * gi;
            let update = (*mi * inv_c1) / ((*vi * inv_c2).sqrt() + eps);
            *x = *x - decay * *x - lr_f * update;
        }
    }
    Ok(())
}
