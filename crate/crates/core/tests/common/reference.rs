//! Plain-loop f64 reference implementations of the Transformer pieces, read
//! directly from a parameter store.

use hdvila_core::params::ParamStore;

pub type Mat = Vec<Vec<f64>>;

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get(name).unwrap_or_else(|_| panic!("missing {name}")).data().to_vec()
}

pub fn linear(x: &Mat, store: &ParamStore<f64>, prefix: &str) -> Mat {
    let w = param(store, &format!("{prefix}.weight"));
    let b = param(store, &format!("{prefix}.bias"));
    let n_out = b.len();
    let n_in = w.len() / n_out;
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), n_in);
            (0..n_out)
                .map(|j| b[j] + (0..n_in).map(|i| row[i] * w[i * n_out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, store: &ParamStore<f64>, prefix: &str) -> Mat {
    let g = param(store, &format!("{prefix}.gain"));
    let b = param(store, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// Multi-head attention restricted to `groups`, with masked keys skipped.
pub fn attention(x: &Mat, store: &ParamStore<f64>, prefix: &str, groups: &[Vec<usize>], heads: usize, mask: &[bool]) -> Mat {
    let q = linear(x, store, &format!("{prefix}.q"));
    let k = linear(x, store, &format!("{prefix}.k"));
    let v = linear(x, store, &format!("{prefix}.v"));
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; x.len()];
    for g in groups {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for &i in g {
                let keys: Vec<usize> = g.iter().copied().filter(|&j| mask[j]).collect();
                let s: Vec<f64> = keys
                    .iter()
                    .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for (&j, sv) in keys.iter().zip(&s) {
                    let p = (sv - m).exp() / z;
                    for c in cols.clone() {
                        out[i][c] += p * v[j][c];
                    }
                }
            }
        }
    }
    linear(&out, store, &format!("{prefix}.o"))
}

pub fn mlp(x: &Mat, store: &ParamStore<f64>, prefix: &str) -> Mat {
    let h = linear(x, store, &format!("{prefix}.fc1"));
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(&h, store, &format!("{prefix}.fc2"))
}

/// Pre-norm encoder block over a single full group.
pub fn block(x: &Mat, store: &ParamStore<f64>, prefix: &str, heads: usize, mask: &[bool]) -> Mat {
    let all = vec![(0..x.len()).collect::<Vec<_>>()];
    let h = layer_norm(x, store, &format!("{prefix}.attn_norm"));
    let h = attention(&h, store, &format!("{prefix}.attn"), &all, heads, mask);
    let x = add(x, &h);
    let h = layer_norm(&x, store, &format!("{prefix}.mlp_norm"));
    let h = mlp(&h, store, &format!("{prefix}.mlp"));
    add(&x, &h)
}

pub fn rows(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}
