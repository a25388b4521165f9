//! Op examples, scalar reference oracles and invariants for the tensor library.

mod common;

use std::cell::Cell;
use std::sync::Arc;

use common::*;
use hdvila_core::numerics::{finite_diff_check, AttentionLayout, Tape, Tensor, Var};
use hdvila_core::Error;
use proptest::prelude::*;

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn run1(x: Tensor<f64>, f: impl FnOnce(&mut Tape<f64>, Var) -> hdvila_core::Result<Var>) -> Tensor<f64> {
    let mut t = Tape::new();
    let v = t.constant(x);
    let y = f(&mut t, v).unwrap();
    t.value(y).clone()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

// ---- tensor ----

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(matches!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]), Err(Error::Shape { .. })));
    assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
}

#[test]
fn validate_finite_flags_nan() {
    let t = t64(&[2], &[1.0, f64::NAN]);
    assert!(matches!(t.validate_finite("x"), Err(Error::NonFinite(_))));
    assert!(t64(&[1], &[3.0]).validate_finite("x").is_ok());
}

// ---- matmul ----

fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

fn matmul(a: Tensor<f64>, b: Tensor<f64>) -> hdvila_core::Result<Tensor<f64>> {
    let mut t = Tape::new();
    let (a, b) = (t.constant(a), t.constant(b));
    let c = t.matmul(a, b)?;
    Ok(t.value(c).clone())
}

#[test]
fn matmul_examples() {
    let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(matmul(a.clone(), Tensor::identity(2)).unwrap().data(), a.data());
    assert_eq!(matmul(t64(&[1, 2], &[1.0, 2.0]), t64(&[2, 1], &[3.0, 4.0])).unwrap().data(), &[11.0]);
    let a = rand_tensor64(&[5, 7], 1);
    let b = rand_tensor64(&[7, 3], 2);
    close(matmul(a.clone(), b.clone()).unwrap().data(), &matmul_oracle(&a, &b), 1e-12);
    assert!(matches!(matmul(a, rand_tensor64(&[3, 3], 0)), Err(Error::Shape { .. })));
}

// ---- softmax ----

#[test]
fn softmax_examples() {
    let y = run1(t64(&[3], &[0.0, 0.0, 0.0]), |t, x| t.softmax(x, 0));
    close(y.data(), &[1.0 / 3.0; 3], 1e-12);
    let y = run1(t64(&[2], &[0.0, 2f64.ln()]), |t, x| t.softmax(x, 0));
    close(y.data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
    let y = run1(t64(&[2], &[1000.0, 1000.0]), |t, x| t.softmax(x, 0));
    close(y.data(), &[0.5, 0.5], 0.0);
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_f64(&[2], &[1000.0, 1000.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn log_softmax_matches_log_of_softmax() {
    let x = rand_tensor64(&[3, 4], 5);
    let a = run1(x.clone(), |t, x| t.log_softmax(x, 1));
    let b = run1(x, |t, x| t.softmax(x, 1));
    close(a.data(), &b.data().iter().map(|v| v.ln()).collect::<Vec<_>>(), 1e-12);
}

// ---- layer norm ----

fn ln(x: Tensor<f64>, eps: f64) -> Tensor<f64> {
    let d = *x.shape().last().unwrap();
    run1(x, |t, x| {
        let g = t.constant(Tensor::ones(&[d]));
        let b = t.constant(Tensor::zeros(&[d]));
        t.layer_norm(x, g, b, eps)
    })
}

#[test]
fn layer_norm_examples() {
    assert_eq!(ln(t64(&[3], &[2.0, 2.0, 2.0]), 1e-5).data(), &[0.0, 0.0, 0.0]);
    close(ln(t64(&[2], &[1.0, 3.0]), 0.0).data(), &[-1.0, 1.0], 1e-12);
    let mut t = Tape::<f32>::new();
    let x = t.constant(rand_tensor(&[4, 8], 3));
    let g = t.constant(Tensor::ones(&[8]));
    let b = t.constant(Tensor::zeros(&[8]));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    for r in 0..4 {
        let row = t.value(y).row(r);
        let mean = row.iter().sum::<f32>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn layer_norm_affine_applied_last() {
    let y = run1(t64(&[2], &[1.0, 3.0]), |t, x| {
        let g = t.constant(t64(&[2], &[2.0, 3.0]));
        let b = t.constant(t64(&[2], &[0.5, -0.5]));
        t.layer_norm(x, g, b, 0.0)
    });
    close(y.data(), &[-1.5, 2.5], 1e-12);
}

// ---- conv2d ----

fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h as usize + 2 * pad - kh) / stride + 1;
    let ow = (w as usize + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for di in 0..kh {
                        for dj in 0..kw {
                            let y = (i * stride + di) as isize - pad as isize;
                            let xx = (j * stride + dj) as isize - pad as isize;
                            if y >= 0 && y < h && xx >= 0 && xx < w {
                                acc += x.at(&[ic, y as usize, xx as usize]) * k.at(&[oc, ic, di, dj]);
                            }
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = acc;
            }
        }
    }
    (vec![o, oh, ow], out)
}

fn conv(x: Tensor<f64>, k: Tensor<f64>, stride: usize, pad: usize) -> hdvila_core::Result<Tensor<f64>> {
    let mut t = Tape::new();
    let (x, k) = (t.constant(x), t.constant(k));
    let y = t.conv2d(x, k, stride, pad)?;
    Ok(t.value(y).clone())
}

#[test]
fn conv2d_examples() {
    let x = rand_tensor64(&[1, 3, 3], 1);
    assert_eq!(conv(x.clone(), t64(&[1, 1, 1, 1], &[1.0]), 1, 0).unwrap().data(), x.data());
    let y = conv(Tensor::ones(&[1, 4, 4]), Tensor::ones(&[1, 1, 2, 2]), 2, 0).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2]);
    assert_eq!(y.data(), &[4.0; 4]);
    let x = rand_tensor64(&[2, 5, 5], 2);
    let k = rand_tensor64(&[3, 2, 3, 3], 3);
    for (s, p) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
        let (shape, data) = conv_oracle(&x, &k, s, p);
        let y = conv(x.clone(), k.clone(), s, p).unwrap();
        assert_eq!(y.shape(), shape.as_slice());
        close(y.data(), &data, 1e-12);
    }
    assert!(conv(Tensor::ones(&[1, 2, 2]), Tensor::ones(&[1, 1, 5, 5]), 1, 1).is_err());
}

// ---- max pool ----

fn pool_oracle(x: &Tensor<f64>) -> (Vec<usize>, Vec<f64>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for y in 2 * i..(2 * i + 2).min(h) {
                    for xx in 2 * j..(2 * j + 2).min(w) {
                        m = m.max(x.at(&[ch, y, xx]));
                    }
                }
                out.push(m);
            }
        }
    }
    (vec![c, oh, ow], out)
}

#[test]
fn max_pool_examples() {
    let y = run1(t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), |t, x| t.max_pool2d(x));
    assert_eq!(y.data(), &[4.0]);
    let y = run1(Tensor::full(&[2, 4, 6], 0.7), |t, x| t.max_pool2d(x));
    assert_eq!(y.shape(), &[2, 2, 3]);
    assert!(y.data().iter().all(|&v| v == 0.7));
    for shape in [[3, 6, 8], [2, 5, 3], [1, 1, 1]] {
        let x = rand_tensor64(&shape, 4);
        let (s, d) = pool_oracle(&x);
        let y = run1(x, |t, x| t.max_pool2d(x));
        assert_eq!(y.shape(), s.as_slice());
        assert_eq!(y.data(), d.as_slice());
    }
}

#[test]
fn max_pool_gradient_routes_to_argmax() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(t64(&[1, 2, 2], &[1.0, 5.0, 3.0, 4.0]).with_requires_grad());
    let y = t.max_pool2d(x).unwrap();
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

// ---- bilinear ----

/// Half-pixel-center bilinear resampling, written per output pixel.
fn bilinear_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..oh {
            let (y0, y1, fy) = coord(i, h, oh);
            for j in 0..ow {
                let (x0, x1, fx) = coord(j, w, ow);
                let top = x.at(&[ch, y0, x0]) * (1.0 - fx) + x.at(&[ch, y0, x1]) * fx;
                let bot = x.at(&[ch, y1, x0]) * (1.0 - fx) + x.at(&[ch, y1, x1]) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

#[test]
fn bilinear_examples() {
    let y = run1(Tensor::full(&[2, 3, 3], 1.25), |t, x| t.interpolate_bilinear(x, 5, 2));
    assert_eq!(y.shape(), &[2, 5, 2]);
    close(y.data(), &[1.25; 20], 1e-12);
    let x = rand_tensor64(&[2, 3, 4], 1);
    assert_eq!(run1(x.clone(), |t, x| t.interpolate_bilinear(x, 3, 4)).data(), x.data());
    let ramp = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
    for (oh, ow) in [(2, 2), (8, 8), (3, 5), (1, 1)] {
        let y = run1(ramp.clone(), |t, x| t.interpolate_bilinear(x, oh, ow));
        close(y.data(), &bilinear_oracle(&ramp, oh, ow), 1e-12);
    }
}

#[test]
fn bilinear_downsample_2x_averages_pairs() {
    let y = run1(t64(&[1, 1, 4], &[0.0, 2.0, 4.0, 6.0]), |t, x| t.interpolate_bilinear(x, 1, 2));
    close(y.data(), &[1.0, 5.0], 1e-12);
}

// ---- the remaining kernels: identity / closed form / oracle ----

#[test]
fn add_mul_examples() {
    let x = rand_tensor64(&[2, 3], 1);
    let z = Tensor::zeros(&[2, 3]);
    let mut t = Tape::new();
    let (a, b) = (t.constant(x.clone()), t.constant(z));
    let s = t.add(a, b).unwrap();
    assert_eq!(t.value(s).data(), x.data());
    let one = t.constant(Tensor::ones(&[2, 3]));
    let m = t.mul(a, one).unwrap();
    assert_eq!(t.value(m).data(), x.data());

    let y = run1(t64(&[2], &[1.5, -2.0]), |t, x| {
        let c = t.constant(t64(&[2], &[2.0, 3.0]));
        let s = t.add(x, c)?;
        t.mul(s, c)
    });
    assert_eq!(y.data(), &[7.0, 3.0]);

    let y2 = rand_tensor64(&[2, 3], 2);
    let got = run1(x.clone(), |t, a| {
        let b = t.constant(y2.clone());
        t.sub(a, b)
    });
    let want: Vec<f64> = x.data().iter().zip(y2.data()).map(|(a, b)| a - b).collect();
    assert_eq!(got.data(), want.as_slice());
    assert!(matches!(
        {
            let mut t = Tape::<f64>::new();
            let a = t.constant(Tensor::zeros(&[2]));
            let b = t.constant(Tensor::zeros(&[3]));
            t.add(a, b)
        },
        Err(Error::Shape { .. })
    ));
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn gelu_examples() {
    let y = run1(t64(&[3], &[0.0, 10.0, -10.0]), |t, x| Ok(t.gelu(x)));
    close(y.data(), &[0.0, 10.0, 0.0], 1e-12);
    let x = rand_tensor64(&[7], 3);
    let y = run1(x.clone(), |t, x| Ok(t.gelu(x)));
    close(y.data(), &x.data().iter().map(|&v| gelu_ref(v)).collect::<Vec<_>>(), 1e-15);
}

#[test]
fn embedding_examples() {
    let table = Tensor::from_fn(&[4, 2], |i| i as f64);
    let y = run1(table.clone(), |t, x| t.embedding(x, &[0, 1, 2, 3]));
    assert_eq!(y.data(), table.data());
    let y = run1(table.clone(), |t, x| t.embedding(x, &[3, 3, 0]));
    assert_eq!(y.data(), &[6.0, 7.0, 6.0, 7.0, 0.0, 1.0]);
    let mut t = Tape::new();
    let tv = t.constant(table);
    assert!(t.embedding(tv, &[4]).is_err());
}

#[test]
fn embedding_gradient_accumulates_repeats() {
    let mut t = Tape::<f64>::new();
    let table = t.leaf(Tensor::zeros(&[3, 2]).with_requires_grad());
    let y = t.embedding(table, &[1, 1, 2]).unwrap();
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert_eq!(t.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
}

#[test]
fn concat_examples() {
    let a = rand_tensor64(&[2, 3], 1);
    let b = rand_tensor64(&[1, 3], 2);
    let y = run1(a.clone(), |t, x| t.concat_rows(&[x]));
    assert_eq!(y.data(), a.data());
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let r = t.concat_rows(&[av, bv]).unwrap();
    let want: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
    assert_eq!(t.value(r).data(), want.as_slice());
    let c = t.constant(t64(&[2, 1], &[9.0, 8.0]));
    let y = t.concat_cols(&[av, c]).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 4]);
    assert_eq!(t.value(y).row(1)[3], 8.0);
    assert_eq!(t.value(y).row(1)[..3], *a.row(1));
    assert!(t.concat_cols(&[av, bv]).is_err());
}

#[test]
fn reduction_examples() {
    let x = rand_tensor64(&[1], 1);
    assert_eq!(run1(x.clone(), |t, x| Ok(t.sum(x))).data(), x.data());
    assert_eq!(run1(x.clone(), |t, x| Ok(t.mean(x))).data(), x.data());
    assert_eq!(run1(t64(&[4], &[1.0, 2.0, 3.0, 4.0]), |t, x| Ok(t.sum(x))).data(), &[10.0]);
    assert_eq!(run1(t64(&[4], &[1.0, 2.0, 3.0, 4.0]), |t, x| Ok(t.mean(x))).data(), &[2.5]);
    let m = rand_tensor64(&[3, 2], 2);
    let y = run1(m.clone(), |t, x| t.mean_rows(x));
    let want: Vec<f64> = (0..2).map(|j| (0..3).map(|i| m.at(&[i, j])).sum::<f64>() / 3.0).collect();
    close(y.data(), &want, 1e-15);
}

#[test]
fn transpose_reshape_examples() {
    let x = rand_tensor64(&[1, 1], 1);
    assert_eq!(run1(x.clone(), |t, x| t.transpose(x)).data(), x.data());
    let y = run1(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), |t, x| t.transpose(x));
    assert_eq!(y.shape(), &[3, 2]);
    assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let m = rand_tensor64(&[3, 4], 2);
    let y = run1(m.clone(), |t, x| {
        let a = t.transpose(x)?;
        t.transpose(a)
    });
    assert_eq!(y.data(), m.data());
    let y = run1(m.clone(), |t, x| t.reshape(x, &[2, 6]));
    assert_eq!(y.shape(), &[2, 6]);
    assert_eq!(y.data(), m.data());
    let mut t = Tape::new();
    let v = t.constant(m);
    assert!(t.reshape(v, &[5, 2]).is_err());
}

// ---- attention ----

/// Scalar reference for masked multi-head attention over one group.
fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, mask: &[bool]) -> Vec<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    mask[j].then(|| (0..dh).map(|c| q.at(&[i, h * dh + c]) * k.at(&[j, h * dh + c])).sum::<f64>() / (dh as f64).sqrt())
                })
                .collect();
            let m = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = scores.iter().flatten().map(|s| (s - m).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let p = (s - m).exp() / z;
                    for c in 0..dh {
                        out[i * d + h * dh + c] += p * v.at(&[j, h * dh + c]);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_scalar_oracle() {
    let (q, k, v) = (rand_tensor64(&[5, 6], 1), rand_tensor64(&[5, 6], 2), rand_tensor64(&[5, 6], 3));
    let mask = vec![true, false, true, true, false];
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let y = t.attention(qv, kv, vv, Arc::new(AttentionLayout::full(5, 3, Some(mask.clone())))).unwrap();
    close(t.value(y).data(), &attention_oracle(&q, &k, &v, 3, &mask), 1e-12);
}

#[test]
fn attention_groups_are_independent() {
    let (q, k, v) = (rand_tensor64(&[4, 2], 1), rand_tensor64(&[4, 2], 2), rand_tensor64(&[4, 2], 3));
    let layout = AttentionLayout {
        heads: 1,
        groups: vec![vec![0, 2], vec![1, 3]],
        key_mask: None,
    };
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let y = t.attention(qv, kv, vv, Arc::new(layout)).unwrap();
    let rows = |m: &Tensor<f64>, r: &[usize]| {
        let d: Vec<f64> = r.iter().flat_map(|&i| m.row(i).to_vec()).collect();
        t64(&[r.len(), 2], &d)
    };
    let even = attention_oracle(&rows(&q, &[0, 2]), &rows(&k, &[0, 2]), &rows(&v, &[0, 2]), 1, &[true, true]);
    close(t.value(y).row(0), &even[0..2], 1e-12);
    close(t.value(y).row(2), &even[2..4], 1e-12);
}

#[test]
fn attention_layout_must_cover_rows() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[3, 2]));
    let bad = AttentionLayout {
        heads: 1,
        groups: vec![vec![0, 1]],
        key_mask: None,
    };
    assert!(t.attention(x, x, x, Arc::new(bad)).is_err());
    assert!(t.attention(x, x, x, Arc::new(AttentionLayout::full(3, 4, None))).is_err());
}

// ---- backward ----

#[test]
fn backward_sum_of_squares() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(t64(&[3], &[1.0, 2.0, 3.0]).with_requires_grad());
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_accumulates_until_zero_grad() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(t64(&[2], &[1.0, -1.0]).with_requires_grad());
    let l = t.sum(x);
    t.backward(l).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    t.zero_grad();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_sum_matmul_matches_finite_differences() {
    let b = rand_tensor(&[4, 2], 9);
    let r = finite_diff_check(
        |t, a| {
            let bv = t.constant(b.clone());
            let c = t.matmul(a, bv)?;
            Ok(t.sum(c))
        },
        &rand_tensor(&[3, 4], 8),
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn detached_input_gets_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(t64(&[2], &[1.0, 2.0]).with_requires_grad());
    let c = t.constant(t64(&[2], &[3.0, 4.0]));
    let p = t.mul(x, c).unwrap();
    let l = t.sum(p);
    t.backward(l).unwrap();
    assert!(t.grad(c).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(&[2]).with_requires_grad());
    assert_eq!(t.backward(x), Err(Error::NonScalarLoss(vec![2])));
}

#[test]
fn finite_diff_check_on_sum_is_exact() {
    let r = finite_diff_check(|t, x| Ok(t.sum(x)), &rand_tensor64(&[5], 1), 1e-3).unwrap();
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn finite_diff_check_rejects_nondeterminism() {
    let calls = Cell::new(0u32);
    let r = finite_diff_check(
        |t, x| {
            calls.set(calls.get() + 1);
            let s = t.sum(x);
            Ok(t.add_scalar(s, calls.get() as f64))
        },
        &rand_tensor64(&[2], 1),
        1e-3,
    );
    assert_eq!(r.unwrap_err(), Error::NonDeterministic);
}

// ---- invariants ----

fn small_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..4)
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one_and_ignore_shifts(shape in small_shape(), seed in 0u64..1000, shift in -50.0f32..50.0, axis_pick in 0usize..3) {
        let axis = axis_pick % shape.len();
        let x = rand_tensor(&shape, seed).map(|v| v * 10.0);
        let mut t = Tape::<f32>::new();
        let xv = t.constant(x.clone());
        let y = t.softmax(xv, axis).unwrap();
        let shifted = t.add_scalar(xv, shift);
        let ys = t.softmax(shifted, axis).unwrap();
        let (y, ys) = (t.value(y).clone(), t.value(ys).clone());
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        for o in 0..outer {
            for i in 0..inner {
                let s: f32 = (0..len).map(|k| y.data()[(o * len + k) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
        prop_assert!(y.max_abs_diff(&ys) < 1e-5);
    }

    #[test]
    fn conv_output_shape_formula(c in 1usize..3, h in 1usize..9, w in 1usize..9, o in 1usize..3, kh in 1usize..4, kw in 1usize..4, stride in 1usize..4, pad in 0usize..3) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::ones(&[c, h, w]));
        let k = t.constant(Tensor::ones(&[o, c, kh, kw]));
        let y = t.conv2d(x, k, stride, pad);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            prop_assert!(y.is_err());
        } else {
            let y = y.unwrap();
            prop_assert_eq!(t.shape(y), &[o, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1][..]);
        }
    }

    #[test]
    fn pool_and_resize_shapes(c in 1usize..3, h in 1usize..9, w in 1usize..9, oh in 1usize..9, ow in 1usize..9) {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::ones(&[c, h, w]));
        let p = t.max_pool2d(x).unwrap();
        prop_assert_eq!(t.shape(p), &[c, h.div_ceil(2), w.div_ceil(2)][..]);
        let r = t.interpolate_bilinear(x, oh, ow).unwrap();
        prop_assert_eq!(t.shape(r), &[c, oh, ow][..]);
    }

    #[test]
    fn matmul_identity_is_bitwise(m in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let a = rand_tensor(&[m, n], seed);
        let mut t = Tape::<f32>::new();
        let av = t.constant(a.clone());
        let i = t.constant(Tensor::identity(n));
        let y = t.matmul(av, i).unwrap();
        prop_assert!(t.value(y).bitwise_eq(&a));
    }
}
