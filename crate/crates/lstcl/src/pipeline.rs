//! The steps behind each command, shared by the binary and the tests.
//!
//! An output directory holds one subdirectory per stage:
//! `pretrain/{checkpoint.toml,checkpoint.bin,metrics.csv}`,
//! `probe/{report.toml,classifier.*}`, `finetune/{report.toml,metrics.csv,classifier.*}`,
//! `eval/report.toml` and `sweep/{sweep.csv,sweep_summary.txt,cell-NNN/}`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lstcl_core::contrastive::{Encoder, BACKBONE};
use lstcl_core::evaluation::{evaluate_classifier, finetune as core_finetune, linear_probe, ProbeResult};
use lstcl_core::exec::BatchExecutor;
use lstcl_core::params::ParamStore;
use lstcl_core::trainer::{pretrain as core_pretrain, Control, StepRecord, TrainHooks, TrainState};
use lstcl_core::videogen::Video;

use crate::checkpoint::{Checkpoint, CLASSIFIER, ONLINE};
use crate::config::{ExperimentConfig, SweepPoint};
use crate::corpus::{self, Splits};
use crate::error::{CliError, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{MetricsWriter, Row};
use crate::report::ReportFile;

pub fn encoder(cfg: &ExperimentConfig) -> Result<Encoder> {
    Ok(Encoder::new(&cfg.encoder_config()?)?)
}

/// Artifact locations under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("checkpoint")
    }
    pub fn pretrain_metrics(&self) -> PathBuf {
        self.root.join("pretrain").join("metrics.csv")
    }
    pub fn probe_report(&self) -> PathBuf {
        self.root.join("probe").join("report.toml")
    }
    pub fn probe_classifier(&self) -> PathBuf {
        self.root.join("probe").join("classifier")
    }
    pub fn finetune_report(&self) -> PathBuf {
        self.root.join("finetune").join("report.toml")
    }
    pub fn finetune_metrics(&self) -> PathBuf {
        self.root.join("finetune").join("metrics.csv")
    }
    pub fn finetune_classifier(&self) -> PathBuf {
        self.root.join("finetune").join("classifier")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval").join("report.toml")
    }
    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

pub fn gen(cfg: &ExperimentConfig, data_dir: &Path) -> Result<corpus::Manifest> {
    corpus::generate_dir(cfg, data_dir)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from the checkpoint in the output directory when one exists.
    pub resume: bool,
    /// Stop once this many optimizer steps have been taken in total.
    pub max_steps: Option<u64>,
}

pub struct PretrainOutcome {
    pub state: TrainState<f32>,
    pub checkpoint_hash: String,
    pub resumed_from: Option<u64>,
    pub total_steps: u64,
}

struct RunHooks<'a> {
    metrics: MetricsWriter,
    start: Instant,
    checkpoint_steps: u64,
    max_steps: Option<u64>,
    stem: &'a Path,
    cfg: &'a ExperimentConfig,
    failure: Option<CliError>,
}

impl TrainHooks<f32> for RunHooks<'_> {
    fn on_step(&mut self, r: &StepRecord, state: &TrainState<f32>) -> lstcl_core::Result<Control> {
        let row = Row { step: r.step, epoch: r.epoch, lr: r.lr, loss: r.loss, wall_ms: self.start.elapsed().as_millis() as u64 };
        let mut result = self.metrics.write(&row);
        if result.is_ok() && self.checkpoint_steps > 0 && state.step % self.checkpoint_steps == 0 {
            result = save_train_state(self.cfg, state, self.stem).map(|_| ());
        }
        if let Err(e) = result {
            self.failure = Some(e);
            return Ok(Control::Stop);
        }
        Ok(if self.max_steps.is_some_and(|m| state.step >= m) { Control::Stop } else { Control::Continue })
    }
}

fn save_train_state(cfg: &ExperimentConfig, state: &TrainState<f32>, stem: &Path) -> Result<String> {
    let ckpt = Checkpoint::from_train_state(cfg.hash(), cfg.model_hash(), state);
    Ok(ckpt.save(stem)?.payload_sha256)
}

/// Contrastive pretraining with metrics, periodic checkpoints and resume.
pub fn pretrain<E: BatchExecutor>(
    cfg: &ExperimentConfig,
    train: &[Video],
    out: &Layout,
    opts: PretrainOptions,
    exec: &E,
) -> Result<PretrainOutcome> {
    let enc = encoder(cfg)?;
    let tcfg = cfg.train()?;
    tcfg.validate()?;
    if tcfg.epochs > 0 {
        lstcl_core::trainer::check_feasible(train, &enc, &tcfg.sampling)?;
    }
    let stem = out.pretrain_checkpoint();
    let metrics_path = out.pretrain_metrics();
    let existing = checkpoint_exists(&crate::checkpoint::paths(&stem).0);
    let (state, metrics, resumed_from) = if opts.resume && existing {
        let ckpt = Checkpoint::load(&stem)?;
        if ckpt.config_hash != cfg.hash() {
            return Err(CliError::usage(format!(
                "checkpoint {} was written under a different config",
                stem.display()
            )));
        }
        let state = ckpt.into_train_state()?;
        let step = state.step;
        (state, MetricsWriter::resume(&metrics_path, &cfg.hash(), step)?, Some(step))
    } else {
        (TrainState::init(&enc, &tcfg), MetricsWriter::create(&metrics_path, &cfg.hash())?, None)
    };
    let spe = tcfg.steps_per_epoch(train.len()) as u64;
    let mut hooks = RunHooks {
        metrics,
        start: Instant::now(),
        checkpoint_steps: spe * cfg.pretrain.checkpoint_every as u64,
        max_steps: opts.max_steps,
        stem: &stem,
        cfg,
        failure: None,
    };
    let state = core_pretrain(&enc, train, &tcfg, state, exec, &mut hooks)?;
    if let Some(e) = hooks.failure {
        return Err(e);
    }
    let checkpoint_hash = save_train_state(cfg, &state, &stem)?;
    Ok(PretrainOutcome { state, checkpoint_hash, resumed_from, total_steps: tcfg.total_steps(train.len()) as u64 })
}

fn checkpoint_exists(p: &Path) -> bool {
    p.is_file()
}

/// Loads a checkpoint and checks it was written for this model shape.
pub fn load_checkpoint(cfg: &ExperimentConfig, stem: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(stem)?;
    if ckpt.model_hash != cfg.model_hash() {
        return Err(CliError::usage(format!(
            "checkpoint {} was written for a different model shape",
            stem.display()
        )));
    }
    Ok(ckpt)
}

fn pretrained_online(cfg: &ExperimentConfig, out: &Layout) -> Result<(ParamStore<f32>, u64)> {
    let ckpt = load_checkpoint(cfg, &out.pretrain_checkpoint())?;
    let step = ckpt.step;
    let online = ckpt.group(ONLINE).cloned().ok_or_else(|| CliError::usage("pretraining checkpoint has no online tensors"))?;
    Ok((online, step))
}

fn save_classifier(cfg: &ExperimentConfig, kind: &str, params: ParamStore<f32>, step: u64, stem: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        kind: kind.into(),
        config_hash: cfg.hash(),
        model_hash: cfg.model_hash(),
        step,
        adam_step: 0,
        groups: vec![(CLASSIFIER.into(), params)],
    };
    ckpt.save(stem).map(|_| ())
}

/// Linear probe on the frozen pretrained backbone.
pub fn probe<E: BatchExecutor>(cfg: &ExperimentConfig, data: &Splits, out: &Layout, exec: &E) -> Result<ProbeResult<f32>> {
    let (online, step) = pretrained_online(cfg, out)?;
    probe_params(cfg, &online, step, data, out, exec)
}

/// Linear probe on the backbone tensors of `online`.
pub fn probe_params<E: BatchExecutor>(
    cfg: &ExperimentConfig,
    online: &ParamStore<f32>,
    step: u64,
    data: &Splits,
    out: &Layout,
    exec: &E,
) -> Result<ProbeResult<f32>> {
    let enc = encoder(cfg)?;
    let r = linear_probe(&enc.backbone, online, BACKBONE, &data.train, &data.test, data.k_classes, &cfg.probe_config(), exec)?;
    let mut classifier = online.with_prefix(&format!("{BACKBONE}."));
    for (k, t) in r.head.iter() {
        classifier.insert(k.clone(), t.clone());
    }
    save_classifier(cfg, "probe", classifier, step, &out.probe_classifier())?;
    ReportFile::new("probe", cfg.hash(), cfg.model_hash(), step)
        .with("train", &r.train)
        .with("test", &r.test)
        .save(&out.probe_report())?;
    Ok(r)
}

pub struct FinetuneOutcome {
    pub report: lstcl_core::evaluation::EvalReport,
    pub steps: usize,
    pub pretrained: bool,
}

/// Supervised finetuning, from the pretrained backbone or from scratch.
pub fn finetune<E: BatchExecutor>(cfg: &ExperimentConfig, data: &Splits, out: &Layout, exec: &E) -> Result<FinetuneOutcome> {
    let enc = encoder(cfg)?;
    let init = if cfg.finetune.pretrained { Some(pretrained_online(cfg, out)?.0) } else { None };
    let fcfg = cfg.finetune_config();
    let r = core_finetune(&enc.backbone, init.as_ref(), &data.train, &data.test, data.k_classes, &fcfg, exec)?;
    let mut metrics = MetricsWriter::create(&out.finetune_metrics(), &cfg.hash())?;
    let spe = data.train.len().div_ceil(fcfg.batch_size).max(1);
    let total = r.losses.len();
    for (step, &loss) in r.losses.iter().enumerate() {
        let lr = lstcl_core::optim::lr_at(step, total, fcfg.warmup_epochs * spe, fcfg.peak_lr())?;
        metrics.write(&Row { step: step as u64, epoch: step / spe, lr, loss, wall_ms: 0 })?;
    }
    save_classifier(cfg, "finetune", r.params, r.steps as u64, &out.finetune_classifier())?;
    let mut report = ReportFile::new("finetune", cfg.hash(), cfg.model_hash(), r.steps as u64).with("test", &r.report);
    report.kind = if init.is_some() { "finetune-pretrained" } else { "finetune-scratch" }.into();
    report.save(&out.finetune_report())?;
    Ok(FinetuneOutcome { report: r.report, steps: r.steps, pretrained: init.is_some() })
}

/// Multi-clip evaluation of a saved classifier on the test split.
pub fn eval<E: BatchExecutor>(
    cfg: &ExperimentConfig,
    data: &Splits,
    stem: &Path,
    out: &Layout,
    exec: &E,
) -> Result<lstcl_core::evaluation::EvalReport> {
    let ckpt = load_checkpoint(cfg, stem)?;
    let params = ckpt
        .group(CLASSIFIER)
        .ok_or_else(|| CliError::usage(format!("{} is not a classifier checkpoint", stem.display())))?;
    let enc = encoder(cfg)?;
    let r = evaluate_classifier(&enc.backbone, params, &data.test, data.k_classes, cfg.finetune.n_eval_clips, cfg.finetune.stride, exec)?;
    ReportFile::new("eval", cfg.hash(), cfg.model_hash(), ckpt.step).with("test", &r).save(&out.eval_report())?;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub point: SweepPoint,
    /// `ok` or the error that stopped the cell.
    pub status: String,
    pub probe_train: f64,
    pub probe_test: f64,
    pub final_loss: f64,
    pub wall_s: f64,
}

pub fn cell_layout(out: &Layout, cell: usize) -> Layout {
    Layout::new(out.sweep_dir().join(format!("cell-{cell:03}")))
}

/// Pretrains and probes every grid point; failed cells are recorded and skipped.
pub fn sweep<E: BatchExecutor>(
    cfg: &ExperimentConfig,
    data: &Splits,
    out: &Layout,
    exec: &E,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let section = cfg.sweep.as_ref().ok_or_else(|| CliError::usage("config has no [sweep] section"))?;
    let points = section.points(cfg)?;
    let mut rows = Vec::with_capacity(points.len());
    for (cell, point) in points.into_iter().enumerate() {
        let start = Instant::now();
        let cell_cfg = point.apply(cfg);
        let layout = cell_layout(out, cell);
        let run = pretrain(&cell_cfg, &data.train, &layout, PretrainOptions::default(), exec).and_then(|p| {
            let r = probe_params(&cell_cfg, &p.state.online, p.state.step, data, &layout, exec)?;
            let (_, rows) = crate::metrics::read(&layout.pretrain_metrics())?;
            Ok((r, rows.last().map_or(f64::NAN, |r| r.loss)))
        });
        let row = match run {
            Ok((r, final_loss)) => SweepRow {
                cell,
                point,
                status: "ok".into(),
                probe_train: r.train.top1,
                probe_test: r.test.top1,
                final_loss,
                wall_s: start.elapsed().as_secs_f64(),
            },
            Err(e) => SweepRow {
                cell,
                point,
                status: format!("failed: {e}"),
                probe_train: f64::NAN,
                probe_test: f64::NAN,
                final_loss: f64::NAN,
                wall_s: start.elapsed().as_secs_f64(),
            },
        };
        progress(&row);
        rows.push(row);
    }
    write_sweep(cfg, &rows, &out.sweep_dir())?;
    Ok(rows)
}

#[derive(serde::Serialize)]
struct CsvRow<'a> {
    cell: usize,
    short_stride: usize,
    long_stride: usize,
    strategy: &'a str,
    framework: &'a str,
    seed: u64,
    status: &'a str,
    probe_train: f64,
    probe_test: f64,
    final_loss: f64,
    wall_s: f64,
}

/// Settings shared by the seeds of one grid cell.
type CellKey = (usize, usize, &'static str, &'static str);

fn key(p: &SweepPoint) -> CellKey {
    (p.short_stride, p.long_stride, p.strategy.name(), p.framework.name())
}

/// Mean and sample standard deviation of the successful seeds of each cell,
/// in grid order.
pub fn cell_stats(rows: &[SweepRow]) -> Vec<(CellKey, Vec<f64>, f64, f64)> {
    let mut cells: Vec<(CellKey, Vec<f64>)> = Vec::new();
    for r in rows {
        let k = key(&r.point);
        let i = match cells.iter().position(|(c, _)| *c == k) {
            Some(i) => i,
            None => {
                cells.push((k, Vec::new()));
                cells.len() - 1
            }
        };
        if r.status == "ok" {
            cells[i].1.push(r.probe_test);
        }
    }
    cells
        .into_iter()
        .map(|(k, acc)| {
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let sd = if acc.len() > 1 { (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            (k, acc, mean, sd)
        })
        .collect()
}

fn write_sweep(cfg: &ExperimentConfig, rows: &[SweepRow], dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(CsvRow {
            cell: r.cell,
            short_stride: r.point.short_stride,
            long_stride: r.point.long_stride,
            strategy: r.point.strategy.name(),
            framework: r.point.framework.name(),
            seed: r.point.seed,
            status: &r.status,
            probe_train: r.probe_train,
            probe_test: r.probe_test,
            final_loss: r.final_loss,
            wall_s: r.wall_s,
        })
        .map_err(|e| CliError::Invariant(format!("sweep csv: {e}")))?;
    }
    let body = w.into_inner().map_err(|e| CliError::Invariant(format!("sweep csv: {e}")))?;
    let mut csv_bytes = format!("# config_hash={}\n", cfg.hash()).into_bytes();
    csv_bytes.extend_from_slice(&body);
    write_atomic(&dir.join("sweep.csv"), &csv_bytes)?;
    write_atomic(&dir.join("sweep_summary.txt"), summary(cfg, rows).as_bytes())
}

/// Plain-text table of per-cell means with the best cell named.
pub fn summary(cfg: &ExperimentConfig, rows: &[SweepRow]) -> String {
    let stats = cell_stats(rows);
    let mut s = format!("config_hash {}\n", cfg.hash());
    let _ = writeln!(s, "{:>8} {:>8} {:>12} {:>9} {:>5} {:>8} {:>8}", "short", "long", "strategy", "framework", "runs", "mean", "sd");
    for ((ts, tl, st, fw), acc, mean, sd) in &stats {
        let _ = writeln!(s, "{ts:>8} {tl:>8} {st:>12} {fw:>9} {:>5} {mean:>8.4} {sd:>8.4}", acc.len());
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        let _ = writeln!(s, "{failed} run(s) failed; see sweep.csv");
    }
    let best = stats.iter().filter(|c| !c.1.is_empty()).max_by(|a, b| a.2.total_cmp(&b.2));
    match best {
        Some(((ts, tl, st, fw), _, mean, _)) => {
            let _ = writeln!(s, "best: short {ts} long {tl} {st} {fw} mean test top-1 {mean:.4}");
        }
        None => s.push_str("best: none (every run failed)\n"),
    }
    let by_strategy: Vec<(&str, f64)> =
        ["independent", "included", "disjoint"].iter().filter_map(|n| strategy_mean(&stats, n).map(|m| (*n, m))).collect();
    if by_strategy.len() > 1 {
        let ordered = by_strategy.windows(2).all(|w| w[0].1 >= w[1].1);
        let list: Vec<String> = by_strategy.iter().map(|(n, m)| format!("{n} {m:.4}")).collect();
        let _ = writeln!(s, "strategies: {} ({})", list.join(", "), if ordered { "independent >= included >= disjoint holds" } else { "ordering differs" });
    }
    s
}

fn strategy_mean(stats: &[(CellKey, Vec<f64>, f64, f64)], name: &str) -> Option<f64> {
    let acc: Vec<f64> = stats.iter().filter(|c| c.0 .2 == name).flat_map(|c| c.1.iter().copied()).collect();
    (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
}
