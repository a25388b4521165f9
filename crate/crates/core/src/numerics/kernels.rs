//! Raw slice kernels. Every reduction runs in a fixed row-major order so
//! results are bit-reproducible.

use crate::scalar::Scalar;

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[m,k] x [n,k]^T -> [m,n]`
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `[k,m]^T x [k,n] -> [m,n]`
pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(x[at(j)]));
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

pub fn log_softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(x[at(j)]));
            let mut sum = T::zero();
            for j in 0..len {
                sum += (x[at(j)] - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..len {
                out[at(j)] = x[at(j)] - lse;
            }
        }
    }
    out
}

/// Normalizes each length-`d` slice; returns `(y, mean, rstd)` where `y` is
/// the pre-affine normalized value.
pub fn normalize_rows<T: Scalar>(x: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let dn = T::from_usize_lossy(d);
    for r in 0..rows {
        let s = &x[r * d..(r + 1) * d];
        let mean = s.iter().copied().sum::<T>() / dn;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rstd = T::one() / (var + eps).sqrt();
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(s) {
            *o = (v - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (xhat, means, rstds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let ph = self.h + 2 * self.padding;
        let pw = self.w + 2 * self.padding;
        if self.kh > ph || self.kw > pw || self.stride == 0 {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// Cross-correlation of `x[c_in,h,w]` with `k[c_out,c_in,kh,kw]`.
pub fn conv2d<T: Scalar>(x: &[T], k: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw().expect("validated geometry");
    let mut out = vec![T::zero(); g.c_out * oh * ow];
    let pad = g.padding as isize;
    for co in 0..g.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = (ci * g.h + iy as usize) * g.w;
                        let krow = ((co * g.c_in + ci) * g.kh + ky) * g.kw;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            acc += x[xrow + ix as usize] * k[krow + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to the input and the kernel.
pub fn conv2d_backward<T: Scalar>(x: &[T], k: &[T], dout: &[T], g: ConvGeom) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = g.out_hw().expect("validated geometry");
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    let pad = g.padding as isize;
    for co in 0..g.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = dout[(co * oh + oy) * ow + ox];
                if d == T::zero() {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = (ci * g.h + iy as usize) * g.w;
                        let krow = ((co * g.c_in + ci) * g.kh + ky) * g.kw;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dx[xrow + ix as usize] += d * k[krow + kx];
                            dk[krow + kx] += d * x[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// 2x2/stride-2 max pooling; odd trailing rows/columns are padded with -inf.
/// Returns the pooled values and the flat argmax index of each window.
pub fn max_pool2x2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, x_) = (2 * oy + dy, 2 * ox + dx);
                        if y >= h || x_ >= w {
                            continue;
                        }
                        let i = (ch * h + y) * w + x_;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Source taps for half-pixel-center bilinear resampling along one axis.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn interpolate_bilinear<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, fy) in &ty {
            let fy = T::lit(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::lit(fx);
                let top = x[base + y0 * w + x0] * (T::one() - fx) + x[base + y0 * w + x1] * fx;
                let bot = x[base + y1 * w + x0] * (T::one() - fx) + x[base + y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

pub fn interpolate_bilinear_backward<T: Scalar>(
    dout: &[T],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![T::zero(); c * h * w];
    let mut it = dout.iter();
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, fy) in &ty {
            let fy = T::lit(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::lit(fx);
                let d = *it.next().expect("dout length");
                dx[base + y0 * w + x0] += d * (T::one() - fy) * (T::one() - fx);
                dx[base + y0 * w + x1] += d * (T::one() - fy) * fx;
                dx[base + y1 * w + x0] += d * fy * (T::one() - fx);
                dx[base + y1 * w + x1] += d * fy * fx;
            }
        }
    }
    dx
}

/// Downscales `x[c,h,w]` by an integer factor with box averaging.
pub fn area_downscale<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::one() / T::from_usize_lossy(factor * factor);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..factor {
                    let row = (ch * h + oy * factor + dy) * w + ox * factor;
                    for dx in 0..factor {
                        acc += x[row + dx];
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    out
}
