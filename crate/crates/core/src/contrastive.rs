//! Query/key encoders, the three loss frameworks and momentum updates.
//!
//! Online parameters live under `backbone.*`, `projector.*` and
//! `predictor.*`. Key-side parameters are the same names without the
//! predictor: a separate momentum copy for InfoNCE and BYOL, the online
//! values themselves for SimSiam. Keys are always computed from frozen
//! leaves, so no gradient reaches the key path.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{init_mlp, mlp, Backbone, BackboneConfig};
use crate::error::{bail, Error, Result};
use crate::exec::BatchExecutor;
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{Real, Tensor};

pub const BACKBONE: &str = "backbone";
pub const PROJECTOR: &str = "projector";
pub const PREDICTOR: &str = "predictor";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Framework {
    InfoNce,
    Byol,
    SimSiam,
}

impl Framework {
    pub const ALL: [Framework; 3] = [Framework::InfoNce, Framework::Byol, Framework::SimSiam];

    pub fn name(self) -> &'static str {
        match self {
            Framework::InfoNce => "infonce",
            Framework::Byol => "byol",
            Framework::SimSiam => "simsiam",
        }
    }

    pub fn uses_momentum(self) -> bool {
        !matches!(self, Framework::SimSiam)
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(Framework::InfoNce),
            "byol" => Ok(Framework::Byol),
            "simsiam" => Ok(Framework::SimSiam),
            other => bail!(Config, "unknown framework `{other}`"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub framework: Framework,
    /// InfoNCE temperature `rho`.
    pub temperature: f64,
    /// Momentum coefficient `m`, held constant over training.
    pub momentum: f64,
    pub symmetrize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { framework: Framework::InfoNce, temperature: 0.2, momentum: 0.99, symmetrize: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bail!(Config, "temperature must be positive, got {}", self.temperature);
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1], got {}", self.momentum);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    pub proj_dim: usize,
    /// Hidden width of the projector and predictor relative to their input.
    pub head_ratio: usize,
}

impl EncoderConfig {
    pub fn desk(backbone: BackboneConfig) -> Self {
        Self { backbone, proj_dim: 32, head_ratio: 4 }
    }
}

/// Online and key-side encoder structure sharing one backbone definition.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub backbone: Backbone,
    pub proj_dim: usize,
    pub head_ratio: usize,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        if cfg.proj_dim == 0 || cfg.head_ratio == 0 {
            bail!(Config, "projection width and head ratio must be positive");
        }
        Ok(Self { backbone: Backbone::new(cfg.backbone.clone())?, proj_dim: cfg.proj_dim, head_ratio: cfg.head_ratio })
    }

    /// Fresh online parameters: backbone, projector and predictor.
    pub fn init_online<F: Real, R: Rng>(&self, rng: &mut R) -> ParamStore<F> {
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng };
        self.backbone.init(&mut init, BACKBONE);
        let d = self.backbone.out_dim();
        init_mlp(&mut init, PROJECTOR, d, self.head_ratio * d, self.proj_dim);
        init_mlp(&mut init, PREDICTOR, self.proj_dim, self.head_ratio * self.proj_dim, self.proj_dim);
        store
    }

    /// Exact copy of the online parameters without the predictor.
    pub fn key_params<F: Real>(online: &ParamStore<F>) -> ParamStore<F> {
        online.iter().filter(|(k, _)| !is_predictor(k)).map(|(k, t)| (k.clone(), t.clone())).collect()
    }

    /// Backbone followed by the projector, unnormalized.
    fn project<F: Real>(&self, g: &mut Graph<F>, p: &mut Binder<'_, F>, patches: Var) -> Result<Var> {
        let h = self.backbone.forward(g, p, BACKBONE, patches)?;
        mlp(g, p, PROJECTOR, h)
    }

    /// `normalize(predictor(projector(backbone(x))))`, `(1, proj_dim)`.
    pub fn encode_query<F: Real>(&self, g: &mut Graph<F>, p: &mut Binder<'_, F>, patches: Var) -> Result<Var> {
        let z = self.project(g, p, patches)?;
        let z = mlp(g, p, PREDICTOR, z)?;
        g.normalize_rows(z)
    }

    /// `SG(normalize(projector(backbone(x))))`, `(1, proj_dim)`.
    pub fn encode_key<F: Real>(&self, g: &mut Graph<F>, p: &mut Binder<'_, F>, patches: Var) -> Result<Var> {
        let z = self.project(g, p, patches)?;
        let k = g.normalize_rows(z)?;
        Ok(g.stop_gradient(k))
    }

    /// Key vector of one clip from key-side parameters.
    pub fn key_vector<F: Real>(&self, key_params: &ParamStore<F>, patches: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let mut p = Binder::frozen(key_params);
        let x = g.constant(patches.clone());
        let k = self.encode_key(&mut g, &mut p, x)?;
        Ok(g.value(k).clone())
    }
}

fn is_predictor(name: &str) -> bool {
    name.strip_prefix(PREDICTOR).is_some_and(|rest| rest.starts_with('.'))
}

fn check_finite<F: Real>(g: &Graph<F>, vars: &[Var], what: &str) -> Result<()> {
    if vars.iter().all(|&v| g.value(v).is_finite()) {
        Ok(())
    } else {
        bail!(Numeric, "{what} received non-finite inputs")
    }
}

/// `sum_i -log softmax_j(q_i . k_j / rho)[i]` over rows of `q` and `k`.
pub fn info_nce<F: Real>(g: &mut Graph<F>, q: Var, k: Var, temperature: f64) -> Result<Var> {
    check_finite(g, &[q, k], "info_nce")?;
    let (bq, bk) = (g.value(q).rows(), g.value(k).rows());
    if bq != bk || bq == 0 {
        bail!(Shape, "info_nce needs equal non-empty batches, got {bq} and {bk}");
    }
    let logits = g.matmul_t(q, k, false, true)?;
    let logits = g.scale(logits, F::of(1.0 / temperature));
    let targets: Vec<usize> = (0..bq).collect();
    g.cross_entropy(logits, &targets)
}

/// `sum_i 2 - 2 cos(q_i, k_i)`.
pub fn byol_loss<F: Real>(g: &mut Graph<F>, q: Var, k: Var) -> Result<Var> {
    check_finite(g, &[q, k], "byol_loss")?;
    let b = g.value(q).rows();
    let qn = g.normalize_rows(q)?;
    let kn = g.normalize_rows(k)?;
    let cos = g.row_dot(qn, kn)?;
    let total = g.sum_all(cos);
    let scaled = g.scale(total, F::of(-2.0));
    Ok(g.offset(scaled, F::of(2.0 * b as f64)))
}

/// [`byol_loss`] with the keys behind a stop-gradient.
pub fn simsiam_loss<F: Real>(g: &mut Graph<F>, q: Var, k: Var) -> Result<Var> {
    let k = g.stop_gradient(k);
    byol_loss(g, q, k)
}

pub fn framework_loss<F: Real>(g: &mut Graph<F>, cfg: &LossConfig, q: Var, k: Var) -> Result<Var> {
    match cfg.framework {
        Framework::InfoNce => info_nce(g, q, k, cfg.temperature),
        Framework::Byol => byol_loss(g, q, k),
        Framework::SimSiam => simsiam_loss(g, q, k),
    }
}

/// Loss and online-parameter gradients of one training step.
#[derive(Clone, Debug)]
pub struct StepOutput<F> {
    /// Sum of the terms that were computed.
    pub loss: f64,
    /// `L(Q(short), K(long))`, then `L(Q(long), K(short))` (zero when not symmetrized).
    pub terms: [f64; 2],
    pub grads: ParamStore<F>,
}

/// Parameters used by one step: the online encoder and, for frameworks with
/// a momentum encoder, its key-side copy.
#[derive(Clone, Copy, Debug)]
pub struct StepParams<'a, F> {
    pub online: &'a ParamStore<F>,
    pub momentum: Option<&'a ParamStore<F>>,
}

impl<'a, F: Real> StepParams<'a, F> {
    fn key_side(&self, cfg: &LossConfig) -> Result<&'a ParamStore<F>> {
        match (cfg.framework.uses_momentum(), self.momentum) {
            (true, Some(m)) => Ok(m),
            (false, None) => Ok(self.online),
            (true, None) => bail!(Config, "{} needs a momentum encoder", cfg.framework),
            (false, Some(_)) => bail!(Config, "{} does not use a momentum encoder", cfg.framework),
        }
    }
}

/// One loss term: queries from `q_views`, keys from `k_views`.
///
/// Queries are built as one graph per sample; the loss is evaluated on the
/// stacked query rows, and its row gradients are pushed back through each
/// sample's graph. Per-sample gradients are summed in index order.
fn loss_term<F: Real, E: BatchExecutor>(
    enc: &Encoder,
    params: &StepParams<'_, F>,
    q_views: &[Tensor<F>],
    k_views: &[Tensor<F>],
    cfg: &LossConfig,
    reduction: Reduction,
    exec: &E,
) -> Result<(f64, ParamStore<F>)> {
    let key_params = params.key_side(cfg)?;
    let n = q_views.len();
    let keys = exec.map(n, |i| enc.key_vector(key_params, &k_views[i]));
    let keys = keys.into_iter().collect::<Result<Vec<_>>>()?;
    let queries = exec.map(n, |i| -> Result<_> {
        let mut g = Graph::new();
        let mut p = Binder::trainable(params.online);
        let x = g.constant(q_views[i].clone());
        let q = enc.encode_query(&mut g, &mut p, x)?;
        Ok((g, p, q))
    });
    let queries = queries.into_iter().collect::<Result<Vec<_>>>()?;

    let d = enc.proj_dim;
    let mut lg = Graph::new();
    let q = lg.param(Tensor::from_fn(n, d, |i, j| queries[i].0.value(queries[i].2).get(0, j)));
    let k = lg.constant(Tensor::from_fn(n, d, |i, j| keys[i].get(0, j)));
    let mut loss = framework_loss(&mut lg, cfg, q, k)?;
    if reduction == Reduction::Mean {
        loss = lg.scale(loss, F::of(1.0 / n as f64));
    }
    let value = lg.value(loss).item().as_f64();
    let dq = lg.backward(loss)?.take(q).unwrap_or_else(|| Tensor::zeros(n, d));

    let grads = exec.map(n, |i| -> Result<ParamStore<F>> {
        let (g, p, qv) = &queries[i];
        let seed = Tensor::from_fn(1, d, |_, j| dq.get(i, j));
        Ok(p.collect(g, &g.backward_with(*qv, seed)?))
    });
    let mut total = ParamStore::new();
    for gi in grads {
        total.accumulate(&gi?)?;
    }
    Ok((value, total))
}

/// `L(Q(short), K(long)) + L(Q(long), K(short))`, or the first term alone
/// when `cfg.symmetrize` is off. Views are patch rows of each clip.
pub fn symmetrized_step<F: Real, E: BatchExecutor>(
    enc: &Encoder,
    params: StepParams<'_, F>,
    short: &[Tensor<F>],
    long: &[Tensor<F>],
    cfg: &LossConfig,
    reduction: Reduction,
    exec: &E,
) -> Result<StepOutput<F>> {
    cfg.validate()?;
    params.key_side(cfg)?;
    if short.len() != long.len() || short.is_empty() {
        bail!(Shape, "need equal non-empty view batches, got {} and {}", short.len(), long.len());
    }
    let (l1, mut grads) = loss_term(enc, &params, short, long, cfg, reduction, exec)?;
    let mut terms = [l1, 0.0];
    if cfg.symmetrize {
        let (l2, g2) = loss_term(enc, &params, long, short, cfg, reduction, exec)?;
        terms[1] = l2;
        grads.accumulate(&g2)?;
    }
    // Parameters no query touched (the key-only path never exists online).
    for (name, t) in params.online.iter() {
        if !grads.contains(name) {
            grads.insert(name.clone(), Tensor::zeros(t.rows(), t.cols()));
        }
    }
    Ok(StepOutput { loss: terms[0] + terms[1], terms, grads })
}

/// `theta_m <- m theta_m + (1 - m) theta` for every key-side tensor.
pub fn momentum_update<F: Real>(online: &ParamStore<F>, momentum: &mut ParamStore<F>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        bail!(Config, "momentum must lie in [0, 1], got {m}");
    }
    let shared = online.names().filter(|n| !is_predictor(n)).count();
    if shared != momentum.len() {
        let missing: Vec<&String> = online.names().filter(|n| !is_predictor(n) && !momentum.contains(n)).collect();
        bail!(ParamMap, "momentum encoder has {} tensors, online has {shared}; missing {missing:?}", momentum.len());
    }
    let (a, b) = (F::of(m), F::of(1.0 - m));
    for (name, tm) in momentum.iter_mut() {
        let t = online.get(name)?;
        if t.shape() != tm.shape() {
            bail!(ParamMap, "`{name}` has shape {:?} online and {:?} in the momentum encoder", t.shape(), tm.shape());
        }
        for (x, &y) in tm.data_mut().iter_mut().zip(t.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}
