//! Plain-loop f64 reference implementations of the transformer pieces.

use lstcl_core::params::ParamStore;

pub type Rows = Vec<Vec<f64>>;

fn get(p: &ParamStore<f64>, name: &str) -> Rows {
    let t = p.get(name).unwrap_or_else(|_| panic!("missing parameter {name}"));
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn linear(p: &ParamStore<f64>, prefix: &str, x: &Rows) -> Rows {
    let w = get(p, &format!("{prefix}.w"));
    let b = &get(p, &format!("{prefix}.b"))[0];
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(i, xi)| xi * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(p: &ParamStore<f64>, prefix: &str, x: &Rows) -> Rows {
    let g = &get(p, &format!("{prefix}.g"))[0];
    let b = &get(p, &format!("{prefix}.b"))[0];
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * rs * g[i] + b[i]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn mlp(p: &ParamStore<f64>, prefix: &str, x: &Rows) -> Rows {
    let h = linear(p, &format!("{prefix}.fc1"), x);
    let h: Rows = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(p, &format!("{prefix}.fc2"), &h)
}

/// Dense multi-head attention over every token pair, keeping pairs where
/// `allowed(i, j)` and adding `bias(head, i, j)` to their logits.
pub fn attention(
    p: &ParamStore<f64>,
    prefix: &str,
    x: &Rows,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
    bias: impl Fn(usize, usize, usize) -> f64,
) -> Rows {
    let q = linear(p, &format!("{prefix}.q"), x);
    let k = linear(p, &format!("{prefix}.k"), x);
    let v = linear(p, &format!("{prefix}.v"), x);
    let n = x.len();
    let dim = q[0].len();
    let dh = dim / heads;
    let mut out = vec![vec![0.0; dim]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let logits: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    allowed(i, j).then(|| {
                        let s: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                        s / (dh as f64).sqrt() + bias(h, i, j)
                    })
                })
                .collect();
            let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
            let weights: Vec<f64> = logits.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = weights.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..n).map(|j| weights[j] / z * v[j][c]).sum();
            }
        }
    }
    linear(p, &format!("{prefix}.o"), &out)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn max_abs_diff(a: &Rows, b: &[f64]) -> f64 {
    a.iter().flatten().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
