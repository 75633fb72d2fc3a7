//! Criteria that train on the default desk corpus.

use std::path::{Path, PathBuf};
use std::time::Instant;

use lstcl::config::ExperimentConfig;
use lstcl::corpus::{self, Splits};
use lstcl::exec::RayonExecutor;
use lstcl::metrics;
use lstcl::pipeline::{self, cell_layout, Layout, PretrainOptions, SweepRow};
use lstcl_core::trainer::TrainState;

use crate::Verdict;

const BUDGET_S: f64 = 30.0 * 60.0;

pub struct Desk {
    pub cfg: ExperimentConfig,
    pub data: Splits,
    pub root: PathBuf,
    pub exec: RayonExecutor,
}

impl Desk {
    pub fn new(root: &Path) -> Self {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let cfg = ExperimentConfig::load(&path).expect("desk config");
        let dir = root.join("data");
        pipeline::gen(&cfg, &dir).expect("generate corpus");
        let data = corpus::load_dir(&cfg, &dir).expect("load corpus");
        Self { cfg, data, root: root.to_path_buf(), exec: RayonExecutor::new(0).expect("thread pool") }
    }

    fn layout(&self, name: &str) -> Layout {
        Layout::new(self.root.join(name))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn loss_rows(rows: &[metrics::Row]) -> Vec<(u64, f64)> {
    rows.iter().map(|r| (r.step, r.loss)).collect()
}

pub fn determinism(desk: &Desk) -> Verdict {
    let mut cfg = desk.cfg.clone();
    cfg.pretrain.checkpoint_every = 1;
    let spe = cfg.train().unwrap().steps_per_epoch(desk.data.train.len()) as u64;
    let stop = 2 * spe;
    let run = |name: &str, max_steps: u64, resume: bool| {
        let out = desk.layout(name);
        let o = pipeline::pretrain(&cfg, &desk.data.train, &out, PretrainOptions { resume, max_steps: Some(max_steps) }, &desk.exec)
            .expect("pretrain");
        (o.checkpoint_hash, o.state.step, out)
    };
    let (hash_a, step_a, out_a) = run("det-a", stop, false);
    let (hash_b, _, _) = run("det-b", stop, false);
    run("det-c", spe, false);
    let (hash_c, step_c, out_c) = run("det-c", stop, true);
    let rows_a = metrics::read(&out_a.pretrain_metrics()).unwrap().1;
    let rows_c = metrics::read(&out_c.pretrain_metrics()).unwrap().1;
    let repeat = hash_a == hash_b;
    let resumed = hash_a == hash_c && step_a == step_c && loss_rows(&rows_a) == loss_rows(&rows_c);
    Verdict::new(
        repeat && resumed && rows_a.len() as u64 == stop,
        format!(
            "{stop} steps: repeated run hash equal: {repeat}; resume at step {spe} reproduces {} metric rows and the final hash: {resumed}",
            rows_a.len()
        ),
    )
}

pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub wall_s: f64,
    pub root: Layout,
}

impl Sweep {
    fn probes(&self, long: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.point.long_stride == long && r.status == "ok").map(|r| r.probe_test).collect()
    }
}

pub fn sweep(desk: &Desk) -> Sweep {
    let root = desk.layout("sweep");
    let start = Instant::now();
    let rows = pipeline::sweep(&desk.cfg, &desk.data, &root, &desk.exec, |r| {
        eprintln!(
            "  sweep cell {} long {} seed {}: {} probe {:.3} ({:.0}s)",
            r.cell, r.point.long_stride, r.point.seed, r.status, r.probe_test, r.wall_s
        )
    })
    .expect("sweep");
    Sweep { rows, wall_s: start.elapsed().as_secs_f64(), root }
}

pub struct Baseline {
    pub margin: f64,
    pub pooled_sd: f64,
    pub warmup_loss: f64,
    pub final_loss: f64,
}

pub fn baseline() -> Baseline {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/baseline.toml");
    let t: toml::Table = toml::from_str(&std::fs::read_to_string(path).expect("baseline fixture")).expect("fixture toml");
    let f = |k: &str| t[k].as_float().unwrap_or_else(|| panic!("fixture key {k}"));
    Baseline { margin: f("margin"), pooled_sd: f("pooled_sd"), warmup_loss: f("warmup_loss"), final_loss: f("final_loss") }
}

pub fn stride_effect(s: &Sweep, base: &Baseline) -> Verdict {
    let (short, long) = (s.probes(2), s.probes(8));
    if short.len() != 3 || long.len() != 3 {
        return Verdict::new(false, format!("expected 3 successful seeds per cell, got {} and {}", short.len(), long.len()));
    }
    let margin = mean(&long) - mean(&short);
    let pooled = ((sample_sd(&short).powi(2) + sample_sd(&long).powi(2)) / 2.0).sqrt();
    Verdict::new(
        margin >= pooled && s.wall_s <= BUDGET_S,
        format!(
            "probe (2,8) {} mean {:.3} vs (2,2) {} mean {:.3}: margin {margin:.3}, pooled sd {pooled:.3}; \
             {:.1} min (fixture margin {:.3}, pooled sd {:.3})",
            fmt(&long),
            mean(&long),
            fmt(&short),
            mean(&short),
            s.wall_s / 60.0,
            base.margin,
            base.pooled_sd
        ),
    )
}

pub fn finetune_effect(desk: &Desk, s: &Sweep) -> Verdict {
    let mut pre = Vec::new();
    let mut scratch = Vec::new();
    let mut steps = Vec::new();
    for row in s.rows.iter().filter(|r| r.point.long_stride == 8 && r.status == "ok") {
        let mut cfg = row.point.apply(&desk.cfg);
        cfg.finetune.pretrained = true;
        let a = pipeline::finetune(&cfg, &desk.data, &cell_layout(&s.root, row.cell), &desk.exec).expect("finetune");
        cfg.finetune.pretrained = false;
        let out = desk.layout(&format!("scratch-{}", row.point.seed));
        let b = pipeline::finetune(&cfg, &desk.data, &out, &desk.exec).expect("finetune");
        eprintln!("  finetune seed {}: pretrained {:.3}, scratch {:.3}", row.point.seed, a.report.top1, b.report.top1);
        pre.push(a.report.top1);
        scratch.push(b.report.top1);
        steps.push((a.steps, b.steps));
    }
    let equal = steps.iter().all(|(a, b)| a == b);
    Verdict::new(
        pre.len() == 3 && equal && mean(&pre) >= mean(&scratch),
        format!(
            "pretrained {} mean {:.3} vs scratch {} mean {:.3}, {} optimizer steps each: {equal}",
            fmt(&pre),
            mean(&pre),
            fmt(&scratch),
            mean(&scratch),
            steps.first().map_or(0, |s| s.0)
        ),
    )
}

pub fn frameworks(desk: &Desk, s: &Sweep) -> Verdict {
    let chance = 1.0 / desk.data.k_classes as f64;
    let mut results = Vec::new();
    if let Some(row) = s.rows.iter().find(|r| r.point.long_stride == 8 && r.point.seed == 0) {
        results.push(("infonce".to_string(), row.probe_test, row.wall_s));
    }
    for fw in ["byol", "simsiam"] {
        let mut cfg = desk.cfg.clone();
        cfg.pretrain.framework = fw.into();
        cfg.validate().expect("framework config");
        let out = desk.layout(fw);
        let start = Instant::now();
        let p = pipeline::pretrain(&cfg, &desk.data.train, &out, PretrainOptions::default(), &desk.exec).expect("pretrain");
        let r = pipeline::probe_params(&cfg, &p.state.online, p.state.step, &desk.data, &out, &desk.exec).expect("probe");
        results.push((fw.to_string(), r.test.top1, start.elapsed().as_secs_f64()));
    }
    let pass = results.len() == 3 && results.iter().all(|(_, acc, t)| *acc > chance && *t <= BUDGET_S);
    let detail: Vec<String> = results.iter().map(|(f, a, t)| format!("{f} {a:.3} ({:.1} min)", t / 60.0)).collect();
    Verdict::new(pass, format!("chance {chance:.3}; {}", detail.join(", ")))
}

/// Probe of an untrained backbone against the pretrained probes, 3 seeds each.
pub fn random_init_gap(desk: &Desk, s: &Sweep) -> Verdict {
    let trained = s.probes(8);
    let mut random = Vec::new();
    for seed in 0..3 {
        let cfg = desk.cfg.clone().with_seed(seed);
        let enc = pipeline::encoder(&cfg).unwrap();
        let state: TrainState<f32> = TrainState::init(&enc, &cfg.train().unwrap());
        let out = desk.layout(&format!("random-{seed}"));
        let r = pipeline::probe_params(&cfg, &state.online, 0, &desk.data, &out, &desk.exec).expect("probe");
        random.push(r.test.top1);
    }
    let gap = mean(&trained) - mean(&random);
    Verdict::new(
        gap >= 0.10,
        format!("pretrained probe mean {:.3} vs random-init {} mean {:.3}: gap {gap:.3} (need 0.100)", mean(&trained), fmt(&random), mean(&random)),
    )
}

/// Mean loss over the last warm-up epoch and over the final epoch of each seed.
pub fn loss_drop(desk: &Desk, s: &Sweep, base: &Baseline) -> Verdict {
    let warm = desk.cfg.pretrain.warmup_epochs;
    let mut pairs = Vec::new();
    for row in s.rows.iter().filter(|r| r.point.long_stride == 8 && r.status == "ok") {
        let rows = metrics::read(&cell_layout(&s.root, row.cell).pretrain_metrics()).unwrap().1;
        let last = rows.iter().map(|r| r.epoch).max().unwrap_or(0);
        let epoch_mean = |e: usize| {
            let v: Vec<f64> = rows.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            mean(&v)
        };
        pairs.push((epoch_mean(warm - 1), epoch_mean(last)));
    }
    let pass = !pairs.is_empty() && pairs.iter().all(|(w, f)| f < w);
    let detail: Vec<String> = pairs.iter().map(|(w, f)| format!("{w:.3} -> {f:.3}")).collect();
    Verdict::new(
        pass,
        format!(
            "epoch-mean loss end of warm-up -> final: {} (fixture {:.3} -> {:.3})",
            detail.join(", "),
            base.warmup_loss,
            base.final_loss
        ),
    )
}
