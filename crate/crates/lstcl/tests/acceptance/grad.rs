//! Central-difference gradient checks in double precision.

use std::sync::Arc;
use std::time::Instant;

use lstcl_core::autodiff::{Graph, Var};
use lstcl_core::backbone::{
    dense_plan, divided_st_block, init_divided_block, init_mha, init_mlp, init_patch_merge, mha, mlp, patch_merge,
    DividedPlans, SwinStage,
};
use lstcl_core::contrastive::{byol_loss, info_nce, simsiam_loss};
use lstcl_core::params::{Binder, Init, ParamStore};
use lstcl_core::tensor::Tensor;
use lstcl_core::tokenizer::{EmbeddingConfig, GridLayout, PositionMode, TokenGrid};
use rand::Rng;

use crate::props::{jitter, random_tensor, rng};
use crate::Verdict;

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-5;
const INSTANCES: u64 = 5;

type Build<'a> = dyn Fn(&mut Graph<f64>, &mut Binder<'_, f64>, &[Var]) -> Var + 'a;

/// Relative error with the denominator floored at 1e-3 of the largest
/// gradient entry of the whole operation. Exactly-zero gradients, such as
/// the key bias under softmax, are compared on that scale.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (scale * 1e-3).max(1e-10);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

/// Checks `sum(build(..) * R)` for a fixed random `R` against every
/// parameter and every input flagged in `check_inputs`.
fn check(store: &ParamStore<f64>, inputs: &[Tensor<f64>], check_inputs: &[bool], seed: u64, build: &Build<'_>) -> f64 {
    let weight = {
        let mut g = Graph::new();
        let mut p = Binder::frozen(store);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &mut p, &xs);
        let (r, c) = g.value(y).shape();
        random_tensor(r, c, &mut rng(seed ^ 0xabcd))
    };
    let value = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let mut p = Binder::frozen(store);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &mut p, &xs);
        g.value(y).data().iter().zip(weight.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let mut p = Binder::trainable(store);
    let xs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &mut p, &xs);
    let w = g.constant(weight.clone());
    let prod = g.mul(y, w).unwrap();
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).unwrap();
    let analytic = p.collect(&g, &grads);

    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (name, t) in store.iter() {
        let a = analytic.get(name).map(|g| g.data().to_vec()).unwrap_or_else(|_| vec![0.0; t.len()]);
        let mut probe = store.clone();
        let n: Vec<f64> = (0..t.len())
            .map(|i| {
                let orig = t.data()[i];
                probe.get_mut(name).unwrap().data_mut()[i] = orig + STEP;
                let up = value(&probe, inputs);
                probe.get_mut(name).unwrap().data_mut()[i] = orig - STEP;
                let down = value(&probe, inputs);
                probe.get_mut(name).unwrap().data_mut()[i] = orig;
                (up - down) / (2.0 * STEP)
            })
            .collect();
        all_a.extend(a);
        all_n.extend(n);
    }
    for (k, x) in inputs.iter().enumerate() {
        if !check_inputs[k] {
            continue;
        }
        let a = grads.get(xs[k]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        let mut probe = inputs.to_vec();
        let n: Vec<f64> = (0..x.len())
            .map(|i| {
                let orig = x.data()[i];
                probe[k].data_mut()[i] = orig + STEP;
                let up = value(store, &probe);
                probe[k].data_mut()[i] = orig - STEP;
                let down = value(store, &probe);
                probe[k].data_mut()[i] = orig;
                (up - down) / (2.0 * STEP)
            })
            .collect();
        all_a.extend(a);
        all_n.extend(n);
    }
    rel_err(&all_a, &all_n)
}

fn store_with(seed: u64, f: impl FnOnce(&mut Init<'_, f64, rand_chacha::ChaCha8Rng>)) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    f(&mut Init { store: &mut store, rng: &mut r });
    jitter(&mut store, &mut r, 0.3);
    store
}

fn embed(seed: u64) -> f64 {
    let layout = GridLayout { frames: 2, rows: 2, cols: 2 };
    let (mode, class_token) = match seed % 3 {
        0 => (PositionMode::Absolute, true),
        1 => (PositionMode::Relative, false),
        _ => (PositionMode::Absolute, false),
    };
    let cfg = EmbeddingConfig { layout, patch_dim: 4, width: 6, mode, class_token };
    let store = store_with(seed, |i| cfg.init(i, "emb"));
    let x = random_tensor(layout.len(), 4, &mut rng(seed + 100));
    check(&store, &[x], &[true], seed, &|g, p, xs| {
        let grid = cfg.embed(g, p, "emb", xs[0]).unwrap();
        grid.to_sequence(g).unwrap()
    })
}

fn attention(seed: u64) -> f64 {
    let (n, dim, heads) = (5, 8, 2);
    let mut r = rng(seed + 200);
    let mask: Vec<bool> = (0..n * n).map(|i| i / n == i % n || r.random_bool(0.6)).collect();
    let plan = Arc::new(dense_plan(n, Some(mask), true).unwrap());
    let store = store_with(seed, |i| init_mha(i, "a", dim, heads, Some(n * n)));
    let x = random_tensor(n, dim, &mut r);
    check(&store, &[x], &[true], seed, &|g, p, xs| {
        let bias = p.get(g, "a.rel_bias").unwrap();
        mha(g, p, "a", xs[0], &plan, heads, Some(bias)).unwrap()
    })
}

fn divided(seed: u64) -> f64 {
    let layout = GridLayout { frames: 2, rows: 2, cols: 2 };
    let (dim, heads) = (8, 2);
    let plans = DividedPlans::new(layout).unwrap();
    let store = store_with(seed, |i| init_divided_block(i, "b", dim, heads, 2));
    let mut r = rng(seed + 300);
    let x = random_tensor(layout.len(), dim, &mut r);
    let cls = random_tensor(1, dim, &mut r);
    check(&store, &[x, cls], &[true, true], seed, &|g, p, xs| {
        let grid = TokenGrid { layout, width: dim, tokens: xs[0], class_token: Some(xs[1]) };
        let out = divided_st_block(g, p, "b", grid, &plans, heads).unwrap();
        out.to_sequence(g).unwrap()
    })
}

fn swin(seed: u64) -> f64 {
    let layout = GridLayout { frames: 2, rows: 4, cols: 4 };
    let (dim, heads) = (8, 2);
    let stage = SwinStage::new(layout, (2, 2)).unwrap();
    let store = store_with(seed, |i| stage.init(i, "s", 1, dim, heads, 2));
    let x = random_tensor(layout.len(), dim, &mut rng(seed + 400));
    check(&store, &[x], &[true], seed, &|g, p, xs| stage.forward(g, p, "s", xs[0], 1, heads).unwrap())
}

fn merge(seed: u64) -> f64 {
    let layout = GridLayout { frames: 2, rows: 4, cols: 4 };
    let store = store_with(seed, |i| init_patch_merge(i, "m", 4, 6));
    let x = random_tensor(layout.len(), 4, &mut rng(seed + 500));
    check(&store, &[x], &[true], seed, &|g, p, xs| patch_merge(g, p, "m", xs[0], layout).unwrap().0)
}

fn heads(seed: u64) -> f64 {
    let store = store_with(seed, |i| {
        init_mlp(i, "projector", 8, 16, 4);
        init_mlp(i, "predictor", 4, 8, 4);
    });
    let x = random_tensor(3, 8, &mut rng(seed + 600));
    check(&store, &[x], &[true], seed, &|g, p, xs| {
        let z = mlp(g, p, "projector", xs[0]).unwrap();
        let z = mlp(g, p, "predictor", z).unwrap();
        g.normalize_rows(z).unwrap()
    })
}

fn loss(seed: u64, which: usize) -> f64 {
    let mut r = rng(seed + 700);
    let q = random_tensor(4, 3, &mut r);
    let k = random_tensor(4, 3, &mut r);
    let store = ParamStore::new();
    // The simsiam target sits behind a stop-gradient, so only q is differentiable.
    check(&store, &[q, k], &[true, which != 2], seed, &|g, _, xs| match which {
        0 => info_nce(g, xs[0], xs[1], 0.2).unwrap(),
        1 => byol_loss(g, xs[0], xs[1]).unwrap(),
        _ => simsiam_loss(g, xs[0], xs[1]).unwrap(),
    })
}

pub fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let ops: [(&str, &dyn Fn(u64) -> f64); 9] = [
        ("embed", &embed),
        ("mha", &attention),
        ("divided_st_block", &divided),
        ("st_swin_stage", &swin),
        ("patch_merge", &merge),
        ("projector/predictor", &heads),
        ("info_nce", &|s| loss(s, 0)),
        ("byol", &|s| loss(s, 1)),
        ("simsiam", &|s| loss(s, 2)),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, op) in ops {
        let worst = (0..INSTANCES).map(op).fold(0.0, f64::max);
        pass &= worst <= TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    Verdict::new(
        pass,
        format!("max rel err over {INSTANCES} instances (f64, tol {TOL:e}): {}; {secs:.1}s", parts.join(", ")),
    )
}
