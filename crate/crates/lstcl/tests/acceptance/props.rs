//! Criteria checked directly against the core library: attention, loss and
//! momentum oracles, sampler statistics, partitions and clip aggregation.

use std::collections::BTreeSet;

use lstcl_core::autodiff::Graph;
use lstcl_core::backbone::{
    divided_st_block, init_divided_block, init_patch_merge, merged_layout, patch_merge, window_partition, BackboneConfig,
    DividedPlans, SwinStage, Variant, WindowSpec,
};
use lstcl_core::contrastive::{framework_loss, info_nce, momentum_update, Encoder, EncoderConfig, Framework, LossConfig};
use lstcl_core::evaluation::{aggregate_inference, classifier_scores, init_head};
use lstcl_core::params::{Binder, Init, ParamStore};
use lstcl_core::tensor::Tensor;
use lstcl_core::tokenizer::{GridLayout, TokenGrid};
use lstcl_core::videogen::{extract_clip, generate_corpus, sample_pair, ClipSpec, GeneratorConfig, Strategy, Video};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dense::{self, Rows};
use crate::Verdict;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves every parameter off its structured initial value.
pub fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in store.iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn rows_of(t: &Tensor<f64>) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn coords(l: &GridLayout, i: usize) -> (usize, usize, usize) {
    (i / (l.rows * l.cols), (i / l.cols) % l.rows, i % l.cols)
}

fn divided_error(layout: GridLayout, seed: u64) -> f64 {
    let (dim, heads) = (8, 2);
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    init_divided_block(&mut Init { store: &mut store, rng: &mut r }, "blk", dim, heads, 2);
    jitter(&mut store, &mut r, 0.3);
    let x = random_tensor(layout.len(), dim, &mut r);
    let cls = random_tensor(1, dim, &mut r);

    let plans = DividedPlans::new(layout).unwrap();
    let mut g = Graph::new();
    let mut p = Binder::frozen(&store);
    let grid = TokenGrid { layout, width: dim, tokens: g.constant(x.clone()), class_token: Some(g.constant(cls.clone())) };
    let out = divided_st_block(&mut g, &mut p, "blk", grid, &plans, heads).unwrap();
    let seq = out.to_sequence(&mut g).unwrap();

    let tokens = rows_of(&x);
    let h = dense::layer_norm(&store, "blk.time_norm", &tokens);
    let same_site = |i: usize, j: usize| {
        let (a, b) = (coords(&layout, i), coords(&layout, j));
        (a.1, a.2) == (b.1, b.2)
    };
    let a = dense::attention(&store, "blk.time", &h, heads, same_site, |_, _, _| 0.0);
    let tokens = dense::add(&tokens, &a);
    let mut seq_ref = rows_of(&cls);
    seq_ref.extend(tokens);
    let h = dense::layer_norm(&store, "blk.space_norm", &seq_ref);
    let spatial = |i: usize, j: usize| i == 0 || (j != 0 && coords(&layout, i - 1).0 == coords(&layout, j - 1).0);
    let a = dense::attention(&store, "blk.space", &h, heads, spatial, |_, _, _| 0.0);
    let seq_ref = dense::add(&seq_ref, &a);
    let h = dense::layer_norm(&store, "blk.mlp_norm", &seq_ref);
    let seq_ref = dense::add(&seq_ref, &dense::mlp(&store, "blk.mlp", &h));
    dense::max_abs_diff(&seq_ref, g.value(seq).data())
}

/// Rolled position, window and border region of a token under a cyclic shift.
struct Placed {
    t: usize,
    local: (usize, usize),
    window: (usize, usize),
    region: (u8, u8),
}

fn place(l: &GridLayout, i: usize, window: (usize, usize), shift: (usize, usize)) -> Placed {
    let (t, y, x) = coords(l, i);
    let ry = (y + l.rows - shift.0) % l.rows;
    let rx = (x + l.cols - shift.1) % l.cols;
    let region = |r: usize, n: usize, w: usize, s: usize| match s {
        0 => 0,
        _ if r < n - w => 0,
        _ if r < n - s => 1,
        _ => 2,
    };
    Placed {
        t,
        local: (ry % window.0, rx % window.1),
        window: (ry / window.0, rx / window.1),
        region: (region(ry, l.rows, window.0, shift.0), region(rx, l.cols, window.1, shift.1)),
    }
}

fn swin_error(layout: GridLayout, window: (usize, usize), shift: (usize, usize), seed: u64) -> f64 {
    let (dim, heads) = (8, 2);
    let stage =
        SwinStage::with_specs(layout, WindowSpec::uniform(window), WindowSpec { window, shift }).unwrap();
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    stage.init(&mut Init { store: &mut store, rng: &mut r }, "st", 1, dim, heads, 2);
    jitter(&mut store, &mut r, 0.3);
    let x = random_tensor(layout.len(), dim, &mut r);

    let mut g = Graph::new();
    let mut p = Binder::frozen(&store);
    let xv = g.constant(x.clone());
    let y = stage.forward(&mut g, &mut p, "st", xv, 1, heads).unwrap();

    let (nt, wh, ww) = (layout.frames as isize, window.0 as isize, window.1 as isize);
    let mut z = rows_of(&x);
    for (b, s) in [(0, (0, 0)), (1, shift)] {
        let prefix = format!("st.blocks.{b}");
        let table = store.get(&format!("{prefix}.attn.rel_bias")).unwrap().clone();
        let placed: Vec<Placed> = (0..layout.len()).map(|i| place(&layout, i, window, s)).collect();
        let allowed = |i: usize, j: usize| placed[i].window == placed[j].window && placed[i].region == placed[j].region;
        let bias = |h: usize, i: usize, j: usize| {
            let (a, c) = (&placed[i], &placed[j]);
            let dt = a.t as isize - c.t as isize + nt - 1;
            let dy = a.local.0 as isize - c.local.0 as isize + wh - 1;
            let dx = a.local.1 as isize - c.local.1 as isize + ww - 1;
            table.get(h, ((dt * (2 * wh - 1) + dy) * (2 * ww - 1) + dx) as usize)
        };
        let h = dense::layer_norm(&store, &format!("{prefix}.attn_norm"), &z);
        z = dense::add(&z, &dense::attention(&store, &format!("{prefix}.attn"), &h, heads, allowed, bias));
        let h = dense::layer_norm(&store, &format!("{prefix}.mlp_norm"), &z);
        z = dense::add(&z, &dense::mlp(&store, &format!("{prefix}.mlp"), &h));
    }
    dense::max_abs_diff(&z, g.value(y).data())
}

fn divisors(n: usize) -> impl Iterator<Item = usize> {
    (1..=n).filter(move |d| n % d == 0)
}

pub fn attention_oracles() -> Verdict {
    const TOL: f64 = 1e-6;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for frames in 1..=3 {
        for rows in 1..=3 {
            for cols in 1..=3 {
                let layout = GridLayout { frames, rows, cols };
                worst = worst.max(divided_error(layout, cases));
                cases += 1;
            }
        }
    }
    let divided_cases = cases;
    let mut grids: Vec<(GridLayout, (usize, usize), (usize, usize))> = Vec::new();
    for frames in 1..=3 {
        for rows in 1..=3 {
            for cols in 1..=3 {
                for wh in divisors(rows) {
                    for ww in divisors(cols) {
                        for sh in 0..wh {
                            for sw in 0..ww {
                                grids.push((GridLayout { frames, rows, cols }, (wh, ww), (sh, sw)));
                            }
                        }
                    }
                }
            }
        }
    }
    grids.push((GridLayout { frames: 2, rows: 4, cols: 4 }, (2, 2), (1, 1)));
    for (layout, window, shift) in grids {
        worst = worst.max(swin_error(layout, window, shift, cases));
        cases += 1;
    }
    Verdict::new(
        worst <= TOL,
        format!(
            "{divided_cases} divided grids and {} windowed stages, max |diff| {worst:.2e} (tol {TOL:e})",
            cases - divided_cases
        ),
    )
}

fn info_nce_oracle(q: &Tensor<f64>, k: &Tensor<f64>, rho: f64) -> f64 {
    let b = q.rows();
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> =
            (0..b).map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / rho).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random_tensor(rows, cols, rng);
    for r in 0..rows {
        let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        t.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn tiny_encoder(variant: Variant) -> Encoder {
    let backbone = BackboneConfig {
        variant,
        frames: 2,
        height: 8,
        width: 8,
        channels: 1,
        patch: 4,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        depth: 1,
        stages: vec![1],
        window: (2, 2),
    };
    Encoder::new(&EncoderConfig { backbone, proj_dim: 4, head_ratio: 2 }).unwrap()
}

/// Largest key-side gradient entry and query-side gradient norm of one loss.
fn key_path(enc: &Encoder, framework: Framework, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let online: ParamStore<f64> = enc.init_online(&mut r);
    let key_store = if framework.uses_momentum() { Encoder::key_params(&online) } else { online.clone() };
    let cfg = LossConfig { framework, ..LossConfig::default() };
    let layout = enc.backbone.config().layout();
    let pd = enc.backbone.config().patch_dim();
    let mut g = Graph::new();
    let mut pq = Binder::trainable(&online);
    let mut pk = Binder::trainable(&key_store);
    let (mut qs, mut ks) = (Vec::new(), Vec::new());
    for _ in 0..3 {
        let xq = g.constant(random_tensor(layout.len(), pd, &mut r));
        let xk = g.constant(random_tensor(layout.len(), pd, &mut r));
        qs.push(enc.encode_query(&mut g, &mut pq, xq).unwrap());
        ks.push(enc.encode_key(&mut g, &mut pk, xk).unwrap());
    }
    let q = g.concat_rows(&qs).unwrap();
    let k = g.concat_rows(&ks).unwrap();
    let loss = framework_loss(&mut g, &cfg, q, k).unwrap();
    let grads = g.backward(loss).unwrap();
    let key_grads = pk.collect(&g, &grads);
    let mut key_max: f64 = 0.0;
    for (_, t) in key_grads.iter() {
        key_max = key_max.max(t.max_abs());
    }
    for v in &ks {
        if let Some(t) = grads.get(*v) {
            key_max = key_max.max(t.max_abs());
        }
    }
    let query_norm = pq.collect(&g, &grads).iter().map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>();
    (key_max, query_norm.sqrt())
}

pub fn loss_oracles() -> Verdict {
    let mut r = rng(3);
    let mut nce_err: f64 = 0.0;
    for b in 1..=8 {
        for &rho in &[0.07, 0.2, 1.0] {
            let q = unit_rows(b, 5, &mut r);
            let k = unit_rows(b, 5, &mut r);
            let mut g = Graph::new();
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            let l = info_nce(&mut g, qv, kv, rho).unwrap();
            nce_err = nce_err.max((g.value(l).item() - info_nce_oracle(&q, &k, rho)).abs());
        }
    }

    let mut exact = true;
    for dim in 2..=6 {
        for a in 0..dim {
            let e = |i: usize, s: f64| Tensor::from_fn(1, dim, |_, c| if c == i { s } else { 0.0 });
            let b = (a + 1) % dim;
            for (k, want) in [(e(a, 1.0), 0.0), (e(b, 1.0), 2.0), (e(b, -1.0), 2.0), (e(a, -1.0), 4.0)] {
                for fw in [Framework::Byol, Framework::SimSiam] {
                    let mut g = Graph::new();
                    let (qv, kv) = (g.param(e(a, 1.0)), g.param(k.clone()));
                    let l = framework_loss(&mut g, &LossConfig { framework: fw, ..LossConfig::default() }, qv, kv).unwrap();
                    exact &= g.value(l).item() == want;
                }
            }
        }
    }

    let mut key_max: f64 = 0.0;
    let mut query_live = true;
    for variant in [Variant::DividedSt, Variant::StSwin] {
        let enc = tiny_encoder(variant);
        for (i, fw) in Framework::ALL.into_iter().enumerate() {
            let (km, qn) = key_path(&enc, fw, 40 + i as u64);
            key_max = key_max.max(km);
            query_live &= qn > 0.0;
        }
    }
    Verdict::new(
        nce_err <= 1e-6 && exact && key_max == 0.0 && query_live,
        format!(
            "info_nce max |diff| {nce_err:.2e} over B=1..8; byol/simsiam terms exact: {exact}; \
             key-path max |grad| {key_max:e} (query path live: {query_live})"
        ),
    )
}

pub fn momentum() -> Verdict {
    let mut r = rng(5);
    let enc = tiny_encoder(Variant::DividedSt);
    let online: ParamStore<f64> = enc.init_online(&mut r);
    let mut start = Encoder::key_params(&online);
    jitter(&mut start, &mut r, 0.5);

    let mut formula = true;
    for m in [0.0, 0.5, 0.99, 1.0] {
        let mut key = start.clone();
        momentum_update(&online, &mut key, m).unwrap();
        for (name, t) in key.iter() {
            let (before, theta) = (start.get(name).unwrap(), online.get(name).unwrap());
            for ((&got, &b), &o) in t.data().iter().zip(before.data()).zip(theta.data()) {
                formula &= got == m * b + (1.0 - m) * o;
            }
        }
    }

    let shared = Encoder::key_params(&online);
    let mut key = start.clone();
    let mut last = key.distance(&shared).unwrap();
    let mut monotone = true;
    for _ in 0..100 {
        momentum_update(&online, &mut key, 0.9).unwrap();
        let d = key.distance(&shared).unwrap();
        monotone &= d <= last;
        last = d;
    }
    Verdict::new(
        formula && monotone,
        format!("elementwise formula exact for m in {{0, 0.5, 0.99, 1}}: {formula}; distance non-increasing over 100 updates: {monotone} (final {last:.3e})"),
    )
}

fn chi_square_p(observed: &[f64], expected: &[f64], dof: usize) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
    1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat)
}

pub fn sampler() -> Verdict {
    const DRAWS: usize = 10_000;
    let (t_total, frames, ts, tl) = (64, 4, 2, 8);
    let span = |stride: usize| (frames - 1) * stride + 1;
    let (s_span, l_span) = (span(ts), span(tl));
    let mut notes = Vec::new();
    let mut ok = true;
    for strategy in Strategy::ALL {
        let mut r = rng(11);
        let mut violations = 0;
        let mut property = 0;
        let mut pairs = Vec::with_capacity(DRAWS);
        for _ in 0..DRAWS {
            let (s, l) = sample_pair(t_total, frames, ts, tl, strategy, &mut r).unwrap();
            let bad = s.stride != ts || l.stride != tl || s.length != frames || l.length != frames;
            if bad || s.start + s_span > t_total || l.start + l_span > t_total {
                violations += 1;
            }
            let inside = l.start <= s.start && s.start + s_span <= l.start + l_span;
            let apart = s.start + s_span <= l.start || l.start + l_span <= s.start;
            property += match strategy {
                Strategy::Included => inside as usize,
                Strategy::Disjoint => apart as usize,
                Strategy::Independent => 1,
            };
            pairs.push((s.start, l.start));
        }
        ok &= violations == 0 && property == DRAWS;
        let mut note = format!("{strategy}: {violations} violations, property {property}/{DRAWS}");
        if strategy == Strategy::Independent {
            let (ns, nl) = (t_total - s_span + 1, t_total - l_span + 1);
            let mut hs = vec![0.0; ns];
            let mut hl = vec![0.0; nl];
            for &(s, l) in &pairs {
                hs[s] += 1.0;
                hl[l] += 1.0;
            }
            let p_short = chi_square_p(&hs, &vec![DRAWS as f64 / ns as f64; ns], ns - 1);
            let p_long = chi_square_p(&hl, &vec![DRAWS as f64 / nl as f64; nl], nl - 1);
            let bins = 5;
            let mut table = vec![0.0; bins * bins];
            for &(s, l) in &pairs {
                table[(s * bins / ns) * bins + l * bins / nl] += 1.0;
            }
            let row: Vec<f64> = (0..bins).map(|a| (0..bins).map(|b| table[a * bins + b]).sum()).collect();
            let col: Vec<f64> = (0..bins).map(|b| (0..bins).map(|a| table[a * bins + b]).sum()).collect();
            let expected: Vec<f64> =
                (0..bins * bins).map(|i| row[i / bins] * col[i % bins] / DRAWS as f64).collect();
            let p_joint = chi_square_p(&table, &expected, (bins - 1) * (bins - 1));
            ok &= p_short > 0.01 && p_long > 0.01 && p_joint > 0.01;
            note += &format!(", uniform p {p_short:.3}/{p_long:.3}, independence p {p_joint:.3}");
        }
        notes.push(note);
    }
    Verdict::new(ok, notes.join("; "))
}

pub fn partitions() -> Verdict {
    let mut bijective = true;
    let mut count = 0;
    for frames in 1..=3 {
        for rows in [1, 2, 3, 4, 6] {
            for cols in [1, 2, 3, 4, 6] {
                let layout = GridLayout { frames, rows, cols };
                for wh in divisors(rows) {
                    for ww in divisors(cols) {
                        for shift in [(0, 0), (wh / 2, ww / 2), (wh - 1, ww - 1)] {
                            let part = window_partition(layout, WindowSpec { window: (wh, ww), shift }).unwrap();
                            let mut seen = vec![0usize; layout.len()];
                            for (w, tokens) in part.windows.iter().enumerate() {
                                for (s, &i) in tokens.iter().enumerate() {
                                    seen[i] += 1;
                                    bijective &= part.slots[i] == (w, s);
                                }
                            }
                            bijective &= seen.iter().all(|&c| c == 1);
                            count += 1;
                        }
                    }
                }
            }
        }
    }

    let layout = GridLayout { frames: 2, rows: 4, cols: 4 };
    let uniform = window_partition(layout, WindowSpec::uniform((2, 2))).unwrap().adjacency();
    let shifted = window_partition(layout, WindowSpec { window: (2, 2), shift: (1, 1) }).unwrap().adjacency();
    let union: BTreeSet<_> = uniform.union(&shifted).copied().collect();
    let strict = union.is_superset(&uniform) && union.len() > uniform.len();

    let mut merge_ok = true;
    let mut r = rng(9);
    for (frames, rows, cols) in [(1, 2, 2), (3, 4, 2), (2, 4, 6)] {
        let layout = GridLayout { frames, rows, cols };
        let out = merged_layout(layout).unwrap();
        merge_ok &= out == GridLayout { frames, rows: rows / 2, cols: cols / 2 };
        let (din, dout) = (3, 5);
        let mut store = ParamStore::new();
        init_patch_merge(&mut Init { store: &mut store, rng: &mut r }, "m", din, dout);
        let x = random_tensor(layout.len(), din, &mut r);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let xv = g.constant(x.clone());
        let (y, got) = patch_merge(&mut g, &mut p, "m", xv, layout).unwrap();
        merge_ok &= got == out && g.value(y).shape() == (frames * (rows / 2) * (cols / 2), dout);
        let w = store.get("m.w").unwrap();
        for t in 0..frames {
            for yy in 0..rows / 2 {
                for xx in 0..cols / 2 {
                    let o = (t * (rows / 2) + yy) * (cols / 2) + xx;
                    let group = [(0, 0), (1, 0), (0, 1), (1, 1)];
                    for c in 0..dout {
                        let mut want = 0.0;
                        for (k, (dy, dx)) in group.into_iter().enumerate() {
                            let i = (t * rows + 2 * yy + dy) * cols + 2 * xx + dx;
                            for d in 0..din {
                                want += x.get(i, d) * w.get(k * din + d, c);
                            }
                        }
                        merge_ok &= (g.value(y).get(o, c) - want).abs() < 1e-12;
                    }
                }
            }
        }
    }
    Verdict::new(
        bijective && strict && merge_ok,
        format!(
            "{count} partitions bijective: {bijective}; shifted+uniform adjacency {} > uniform {}; merge halves rows/cols, keeps T: {merge_ok}",
            union.len(),
            uniform.len()
        ),
    )
}

fn constant_video(cfg: &GeneratorConfig, value: f32) -> Video {
    Video {
        frames: vec![value; cfg.t_total * cfg.frame_len()],
        t_total: cfg.t_total,
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        label: 0,
        seed: 0,
    }
}

pub fn inference() -> Verdict {
    let gen = GeneratorConfig::default();
    let mut bcfg = BackboneConfig::desk(Variant::DividedSt);
    bcfg.dim = 8;
    bcfg.heads = 2;
    bcfg.depth = 1;
    let backbone = lstcl_core::backbone::Backbone::new(bcfg).unwrap();
    let mut r = rng(21);
    let mut params: ParamStore<f64> = backbone.init_store(&mut r, "backbone");
    init_head(&mut params, &mut r, backbone.out_dim(), gen.k_classes);
    jitter(&mut params, &mut r, 0.5);
    let score = |c: &lstcl_core::videogen::Clip| classifier_scores(&backbone, &params, c);
    let (frames, stride, n) = (4, 2, 5);

    let mut worst: f64 = 0.0;
    for v in generate_corpus(&gen, 6, 77).unwrap() {
        let got = aggregate_inference(score, &v, n, frames, stride).unwrap();
        let last = v.t_total - ((frames - 1) * stride + 1);
        let mut want = vec![0.0; gen.k_classes];
        for i in 0..n {
            let start = (i as f64 * last as f64 / (n - 1) as f64).round() as usize;
            let p = score(&extract_clip(&v, &ClipSpec { start, stride, length: frames }).unwrap()).unwrap();
            want.iter_mut().zip(p).for_each(|(w, x)| *w += x);
        }
        want.iter_mut().for_each(|w| *w /= n as f64);
        worst = worst.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    let mut exact = true;
    for value in [0.0, 0.25, 0.9] {
        let v = constant_video(&gen, value);
        let one = score(&extract_clip(&v, &ClipSpec { start: 0, stride, length: frames }).unwrap()).unwrap();
        for clips in [1, 5, 7] {
            exact &= aggregate_inference(score, &v, clips, frames, stride).unwrap() == one;
        }
    }
    Verdict::new(
        worst <= 1e-7 && exact,
        format!("5-clip mean vs hand average max |diff| {worst:.2e} (tol 1e-7); constant video equals single clip exactly: {exact}"),
    )
}
