//! Reverse-mode differentiation over a linear recording of operations.
//!
//! Every op appends a node whose inputs were recorded earlier, so the node
//! list is already in topological order and backward is a single reverse
//! sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Token grouping for fused multi-head attention.
///
/// Each group is a set of row indices that attend among themselves. Every
/// row must belong to exactly one group. Keys whose `key_mask` entry is
/// `false` receive exactly zero attention weight.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub groups: Vec<Vec<usize>>,
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionLayout {
    /// One group over all `n` rows.
    pub fn full(n: usize, heads: usize, key_mask: Option<Vec<bool>>) -> Self {
        AttentionLayout {
            heads,
            groups: vec![(0..n).collect()],
            key_mask,
        }
    }

    fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden size {d} not divisible by {} heads",
                self.heads
            )));
        }
        let mut seen = vec![false; n];
        for &i in self.groups.iter().flatten() {
            if i >= n || seen[i] {
                return Err(Error::invalid(format!("attention row {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("attention layout does not cover every row"));
        }
        if let Some(mask) = &self.key_mask {
            if mask.len() != n {
                return Err(Error::shape("attention key mask", n, mask.len()));
            }
        }
        Ok(())
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Gelu(Var),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Interp { x: Var, c: usize, h: usize, w: usize },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    Attention { q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>, probs: Vec<Vec<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-writer operation recorder.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / cols, cols)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_data(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let value = Tensor::new(shape, data).expect("kernel output matches shape");
        self.push(value, op, inputs)
    }

    /// Records a leaf. Gradients accumulate into it when it requires grad.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        value.take_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a detached leaf: no gradient flows into it.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.set_requires_grad(false);
        self.leaf(value)
    }

    /// Leaf for a trainable parameter. Frozen parameters enter as constants.
    /// Repeated lookups of one name return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let tensor = store.get(name)?;
        let mut value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())?;
        value.set_requires_grad(!store.is_frozen(name));
        let var = self.leaf(value);
        self.params.push((name.to_string(), var));
        self.param_index.insert(name.to_string(), var);
        Ok(var)
    }

    /// Parameters recorded on this tape, in first-use order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears accumulated gradients on every leaf.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("[m,k] x [k,n] (lhs {sa:?})"), format!("{sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_data(vec![m, n], data, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", "rank 2", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(x).data(), r, c);
        Ok(self.push_data(vec![c, r], data, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `x[.., k] @ w[k, n] + b[n]`, applied to the trailing axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, cols])? };
        let y = self.matmul(flat, w)?;
        let y = match b {
            Some(b) => self.add_row(y, b)?,
            None => y,
        };
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("rank >= 1") = self.shape(y)[1];
            self.reshape(y, &out_shape)
        }
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_data(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_data(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_data(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// Adds `b[n]` to every length-`n` trailing slice of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(b).numel() != cols {
            return Err(Error::shape("add_row", cols, self.value(b).numel()));
        }
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % cols])
            .collect();
        Ok(self.push_data(self.shape(x).to_vec(), data, Op::AddRow(x, b), &[x, b]))
    }

    /// Adds `b[c]` to channel plane `c` of `x[c, ...]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(b).numel() != c {
            return Err(Error::shape("add_channel", c, self.value(b).numel()));
        }
        let plane = self.value(x).numel() / c;
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i / plane])
            .collect();
        Ok(self.push_data(self.shape(x).to_vec(), data, Op::AddChannel(x, b), &[x, b]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, Op::Exp(x), &[x])
    }

    // ---- normalization ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let (o, l, i) = kernels::axis_split(&shape, axis);
        let data = kernels::softmax(self.value(x).data(), o, l, i);
        Ok(self.push_data(shape, data, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("log_softmax axis {axis} for rank {}", shape.len())));
        }
        let (o, l, i) = kernels::axis_split(&shape, axis);
        let data = kernels::log_softmax(self.value(x).data(), o, l, i);
        Ok(self.push_data(shape, data, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", d, self.value(gain).numel()));
        }
        let (xhat, _, rstd) = kernels::normalize_rows(self.value(x).data(), d, eps);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % d] + b[i % d])
            .collect();
        Ok(self.push_data(shape, data, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let xd = self.value(x).data();
        let tiny = T::lit(1e-12);
        let norms: Vec<T> = (0..rows)
            .map(|r| xd[r * cols..(r + 1) * cols].iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny))
            .collect();
        let data = xd.iter().enumerate().map(|(i, &v)| v / norms[i / cols]).collect();
        self.push_data(shape, data, Op::L2NormalizeRows { x, norms }, &[x])
    }

    // ---- spatial ----

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(Error::shape("conv2d", format!("x[c,h,w] with k[o,c,kh,kw], x={sx:?}"), format!("{sk:?}")));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding,
        };
        let (oh, ow) = geom.out_hw().ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel within padded input {}x{}", geom.h + 2 * padding, geom.w + 2 * padding),
                format!("{}x{} kernel", geom.kh, geom.kw),
            )
        })?;
        let data = kernels::conv2d(self.value(x).data(), self.value(k).data(), geom);
        Ok(self.push_data(vec![geom.c_out, oh, ow], data, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    /// 2x2 max pooling with stride 2; odd sizes are padded with -inf.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("max_pool2d", "rank 3", format!("{s:?}")));
        }
        let (data, argmax) = kernels::max_pool2x2(self.value(x).data(), s[0], s[1], s[2]);
        let shape = vec![s[0], s[1].div_ceil(2), s[2].div_ceil(2)];
        Ok(self.push_data(shape, data, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn interpolate_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("interpolate_bilinear", "x[c,h,w] and positive output size", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let data = kernels::interpolate_bilinear(self.value(x).data(), c, h, w, out_h, out_w);
        Ok(self.push_data(vec![c, out_h, out_w], data, Op::Interp { x, c, h, w }, &[x]))
    }

    // ---- indexing ----

    /// Gathers rows of `table[v, d]` -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", "table[v,d] and non-empty ids", format!("{s:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid(format!("embedding id {bad} out of range {}", s[0])));
        }
        let d = s[1];
        let td = self.value(table).data();
        let data = ids.iter().flat_map(|&i| td[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(self.push_data(vec![ids.len(), d], data, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::shape("select_rows", format!("row indices < {}", s[0]), format!("{rows:?}")));
        }
        let d = s[1];
        let xd = self.value(x).data();
        let data = rows.iter().flat_map(|&r| xd[r * d..(r + 1) * d].iter().copied()).collect();
        Ok(self.push_data(vec![rows.len(), d], data, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(x, &rows)
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || cols.len() != s[0] || cols.iter().any(|&c| c >= s[1]) {
            return Err(Error::shape("pick", format!("{} column indices < {}", s[0], s[1]), format!("{cols:?}")));
        }
        let xd = self.value(x).data();
        let data = cols.iter().enumerate().map(|(i, &c)| xd[i * s[1] + c]).collect();
        Ok(self.push_data(vec![s[0]], data, Op::Pick { x, cols: cols.to_vec() }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", format!("[_, {cols}]"), format!("{s:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push_data(vec![rows, cols], data, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", format!("[{rows}, _]"), format!("{s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push_data(vec![rows, total], data, Op::ConcatCols(parts.to_vec()), parts))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push_data(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize_lossy(v.numel());
        self.push_data(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Mean over rows: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("mean_rows", "rank 2", format!("{s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(&xd[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize_lossy(n);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push_data(vec![d], out, Op::MeanRows(x), &[x]))
    }

    // ---- attention ----

    /// Fused multi-head scaled dot-product attention over `q, k, v: [n, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape("attention", format!("q, k, v all {s:?}"), format!("{:?}", self.shape(k))));
        }
        let (n, d) = (s[0], s[1]);
        layout.validate(n, d)?;
        let dh = d / layout.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(layout.groups.len() * layout.heads);
        for group in &layout.groups {
            let keys: Vec<usize> = match &layout.key_mask {
                Some(m) => group.iter().copied().filter(|&j| m[j]).collect(),
                None => group.clone(),
            };
            if keys.is_empty() {
                return Err(Error::invalid("attention group has no unmasked keys"));
            }
            for h in 0..layout.heads {
                let off = h * dh;
                let mut p = vec![T::zero(); group.len() * keys.len()];
                for (a, &i) in group.iter().enumerate() {
                    let qi = &qd[i * d + off..i * d + off + dh];
                    let row = &mut p[a * keys.len()..(a + 1) * keys.len()];
                    for (slot, &j) in row.iter_mut().zip(&keys) {
                        let kj = &kd[j * d + off..j * d + off + dh];
                        let mut acc = T::zero();
                        for (&x, &y) in qi.iter().zip(kj) {
                            acc += x * y;
                        }
                        *slot = acc * scale;
                    }
                    let sm = kernels::softmax(row, 1, keys.len(), 1);
                    row.copy_from_slice(&sm);
                    let oi = &mut out[i * d + off..i * d + off + dh];
                    for (&w, &j) in row.iter().zip(&keys) {
                        let vj = &vd[j * d + off..j * d + off + dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push_data(vec![n, d], out, Op::Attention { q, k, v, layout, probs }, &[q, k, v]))
    }

    // ---- backward ----

    /// Backpropagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        let seed = Tensor::ones(value.shape());
        self.backward_with(loss, &seed)
    }

    /// Backpropagates an upstream gradient `seed` of the same shape as `root`.
    pub fn backward_with(&mut self, root: Var, seed: &Tensor<T>) -> Result<()> {
        if seed.numel() != self.value(root).numel() {
            return Err(Error::shape("backward_with", self.value(root).numel(), seed.numel()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.data().to_vec());
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut leaf_grads);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut Vec<(usize, Vec<T>)>,
    ) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => leaf_grads.push((i, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                send(*a, kernels::matmul_bt(&g, val(*b), m, n, k));
                send(*b, kernels::matmul_at(val(*a), &g, m, k, n));
            }
            Op::Transpose(x) => {
                let s = out.shape();
                send(*x, kernels::transpose(&g, s[0], s[1]));
            }
            Op::Reshape(x) => send(*x, g),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.iter().map(|&v| -v).collect());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                send(*b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(x) => send(*x, g),
            Op::AddRow(x, b) => {
                let n = self.value(*b).numel();
                let mut db = vec![T::zero(); n];
                for (idx, &v) in g.iter().enumerate() {
                    db[idx % n] += v;
                }
                send(*b, db);
                send(*x, g);
            }
            Op::AddChannel(x, b) => {
                let c = self.value(*b).numel();
                let plane = g.len() / c;
                let db = (0..c).map(|ch| g[ch * plane..(ch + 1) * plane].iter().copied().sum()).collect();
                send(*b, db);
                send(*x, g);
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                send(*x, g.iter().zip(xv).map(|(&d, &v)| d * kernels::gelu_grad(v)).collect());
            }
            Op::Exp(x) => send(*x, g.iter().zip(out.data()).map(|(&d, &y)| d * y).collect()),
            Op::Softmax { x, axis } => {
                let (o, l, inn) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for oo in 0..o {
                    for ii in 0..inn {
                        let at = |j: usize| oo * l * inn + j * inn + ii;
                        let dot: T = (0..l).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..l {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let (o, l, inn) = kernels::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for oo in 0..o {
                    for ii in 0..inn {
                        let at = |j: usize| oo * l * inn + j * inn + ii;
                        let gsum: T = (0..l).map(|j| g[at(j)]).sum();
                        for j in 0..l {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).numel();
                let gv = val(*gain);
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dx = vec![T::zero(); g.len()];
                let dn = T::from_usize_lossy(d);
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let (gr, xr) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut sum_dy = T::zero();
                    let mut sum_dy_x = T::zero();
                    for j in 0..d {
                        let dy = gr[j] * gv[j];
                        sum_dy += dy;
                        sum_dy_x += dy * xr[j];
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                    }
                    for j in 0..d {
                        let dy = gr[j] * gv[j];
                        dx[r * d + j] = rs * (dy - sum_dy / dn - xr[j] * sum_dy_x / dn);
                    }
                }
                send(*gain, dgain);
                send(*bias, dbias);
                send(*x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let (_, cols) = rows_cols(out.shape());
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let row = r * cols..(r + 1) * cols;
                    let dot: T = y[row.clone()].iter().zip(&g[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in row {
                        dx[j] = (g[j] - y[j] * dot) / nrm;
                    }
                }
                send(*x, dx);
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = kernels::conv2d_backward(val(*x), val(*k), &g, *geom);
                send(*x, dx);
                send(*k, dk);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&a, &d) in argmax.iter().zip(&g) {
                    dx[a] += d;
                }
                send(*x, dx);
            }
            Op::Interp { x, c, h, w } => {
                let s = out.shape();
                send(*x, kernels::interpolate_bilinear_backward(&g, *c, *h, *w, s[1], s[2]));
            }
            Op::Embedding { table, ids } => {
                let d = out.shape()[1];
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                send(*table, dt);
            }
            Op::SelectRows { x, rows } => {
                let d = out.shape()[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] += g[r * d + j];
                    }
                }
                send(*x, dx);
            }
            Op::Pick { x, cols } => {
                let n = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, &c) in cols.iter().enumerate() {
                    dx[r * n + c] += g[r];
                }
                send(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    send(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    send(p, dp);
                    off += w;
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / T::from_usize_lossy(n); n]);
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let (n, d) = (s[0], s[1]);
                let inv = T::one() / T::from_usize_lossy(n);
                let dx = (0..n * d).map(|idx| g[idx % d] * inv).collect();
                send(*x, dx);
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, &g);
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[Vec<T>],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = self.shape(q)[1];
        let dh = d / layout.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (mut dq, mut dk, mut dv) = (vec![T::zero(); qd.len()], vec![T::zero(); kd.len()], vec![T::zero(); vd.len()]);
        let mut pi = 0;
        for group in &layout.groups {
            let keys: Vec<usize> = match &layout.key_mask {
                Some(m) => group.iter().copied().filter(|&j| m[j]).collect(),
                None => group.clone(),
            };
            for h in 0..layout.heads {
                let off = h * dh;
                let p = &probs[pi];
                pi += 1;
                let mut dp = vec![T::zero(); keys.len()];
                for (a, &i) in group.iter().enumerate() {
                    let prow = &p[a * keys.len()..(a + 1) * keys.len()];
                    let gi = &g[i * d + off..i * d + off + dh];
                    for (b, &j) in keys.iter().enumerate() {
                        let vj = &vd[j * d + off..j * d + off + dh];
                        let mut acc = T::zero();
                        for (&x, &y) in gi.iter().zip(vj) {
                            acc += x * y;
                        }
                        dp[b] = acc;
                        let dvj = &mut dv[j * d + off..j * d + off + dh];
                        for (o, &x) in dvj.iter_mut().zip(gi) {
                            *o += prow[b] * x;
                        }
                    }
                    let dot: T = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for (b, &j) in keys.iter().enumerate() {
                        let ds = prow[b] * (dp[b] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for t in 0..dh {
                            dq[i * d + off + t] += ds * kd[j * d + off + t];
                            dk[j * d + off + t] += ds * qd[i * d + off + t];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}
