//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node; `backward` walks the nodes once in reverse
//! creation order. Gradients accumulate additively. Nodes that do not depend
//! on any trainable input carry `requires_grad = false` and are skipped.

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    SegmentSoftmax { x: Var, seg: Vec<usize> },
    ScaleRows(Var, Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Conv2d { input: Var, kernels: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, eps: f64 },
    Pick { x: Var, index: usize },
}

/// Records tensor operations so gradients can be replayed in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
    // auxiliary per-node buffers saved by the forward pass (layer-norm inverse std, CE probs)
    saved: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

// ---------------------------------------------------------------------------
// dense kernels

/// out[m×n] += a[m×k] · b[k×n]
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
fn mm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
fn mm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len() - 1);
    &shape[first..]
}

/// `b` broadcasts over `a` when its shape, ignoring leading ones, is a suffix of `a`'s shape.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let b = strip_leading_ones(b);
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn softmax_slice(x: &[f64], out: &mut [f64], stride: usize, n: usize) {
    let mut max = f64::NEG_INFINITY;
    for j in 0..n {
        max = max.max(x[j * stride]);
    }
    let mut z = 0.0;
    for j in 0..n {
        let e = (x[j * stride] - max).exp();
        out[j * stride] = e;
        z += e;
    }
    for j in 0..n {
        out[j * stride] /= z;
    }
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.push_saved(value, op, requires, None)
    }

    fn push_saved(&mut self, value: Tensor, op: Op, requires: bool, saved: Option<Vec<f64>>) -> Var {
        let id = Var(self.values.len());
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        self.saved.push(saved);
        id
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free input that receives a gradient but is not tied to a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter. Repeated loads of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.params.insert(id, v);
        v
    }

    fn req(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires[v.0])
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected a 2-D tensor, got {s:?}"))),
        }
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = self.values[a.0].data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), req))
    }

    // -- elementwise ----------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(Error::shape(format!(
                "{name}: {sb:?} does not broadcast onto {sa:?}"
            )));
        }
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let nb = bv.len();
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        Tensor::new(sa.to_vec(), out)
    }

    /// `a + b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let req = self.req(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "subtract", |x, y| x - y)?;
        let req = self.req(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), req))
    }

    /// Hadamard product with leading-dimension broadcast of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "hadamard", |x, y| x * y)?;
        let req = self.req(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), req))
    }

    /// Elementwise quotient; shapes must match exactly.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "divide: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let t = self.binary(a, b, "divide", |x, y| x / y)?;
        let req = self.req(&[a, b]);
        Ok(self.push(t, Op::Div(a, b), req))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.values[a.0];
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        let req = self.req(&[a]);
        self.push(t, op, req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    // -- reductions -----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().sum();
        let req = self.req(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.values[a.0].data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let req = self.req(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), req)
    }

    /// Mean over rows of a 2-D tensor, as a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        let idx = vec![0; rows];
        let s = self.scatter_add_rows(x, &idx, 1)?;
        Ok(self.scale(s, 1.0 / rows as f64))
    }

    /// Sums over the trailing axis, keeping it as size 1.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let n = t.cols();
        let data: Vec<f64> = t.data().chunks(n).map(|c| c.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let req = self.req(&[a]);
        self.push(Tensor { shape, data }, Op::SumLast(a), req)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                softmax_slice(&src[base..], &mut out[base..], inner, n);
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let req = self.req(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, req))
    }

    /// Normalises each trailing-axis slice to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let n = t.cols();
        let mut out = Vec::with_capacity(t.len());
        let mut inv = Vec::with_capacity(t.len() / n);
        for row in t.data().chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv.push(is);
            out.extend(row.iter().map(|v| (v - mu) * is));
        }
        let t = Tensor {
            shape: t.shape().to_vec(),
            data: out,
        };
        let req = self.req(&[x]);
        self.push_saved(t, Op::LayerNorm { x }, req, Some(inv))
    }

    // -- indexing -------------------------------------------------------------

    fn row_len(&self, x: Var) -> (usize, usize) {
        let t = &self.values[x.0];
        let rows = t.shape()[0];
        (rows, t.len() / rows)
    }

    /// Selects rows (first-axis slices) by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, w) = self.row_len(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::index(format!("row {bad} out of range for {rows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows with no indices"));
        }
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = idx.len();
        let req = self.req(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Sums row `r` of `x` into output row `idx[r]`; output has `out_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (rows, w) = self.row_len(x);
        if idx.len() != rows {
            return Err(Error::shape(format!(
                "scatter_add_rows: {} indices for {rows} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::index(format!("target row {bad} out of range for {out_rows}")));
        }
        let src = self.values[x.0].data();
        let mut out = vec![0.0; out_rows * w];
        for (r, &i) in idx.iter().enumerate() {
            for (o, s) in out[i * w..(i + 1) * w].iter_mut().zip(&src[r * w..(r + 1) * w]) {
                *o += s;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = out_rows;
        let req = self.req(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ScatterAddRows {
                x,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Softmax over groups of elements sharing a segment id. `x` holds one value per element.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let t = &self.values[x.0];
        if t.len() != seg.len() {
            return Err(Error::shape(format!(
                "segment_softmax: {} values, {} segment ids",
                t.len(),
                seg.len()
            )));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= segments) {
            return Err(Error::index(format!("segment {bad} out of range for {segments}")));
        }
        let src = t.data();
        let mut max = vec![f64::NEG_INFINITY; segments];
        for (v, &s) in src.iter().zip(seg) {
            max[s] = max[s].max(*v);
        }
        let mut out: Vec<f64> = src.iter().zip(seg).map(|(v, &s)| (v - max[s]).exp()).collect();
        let mut z = vec![0.0; segments];
        for (v, &s) in out.iter().zip(seg) {
            z[s] += v;
        }
        for (v, &s) in out.iter_mut().zip(seg) {
            *v /= z[s];
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let req = self.req(&[x]);
        Ok(self.push(
            t,
            Op::SegmentSoftmax {
                x,
                seg: seg.to_vec(),
            },
            req,
        ))
    }

    /// Multiplies each row of `m` by the matching entry of `w` (`w` has one value per row).
    pub fn scale_rows(&mut self, m: Var, w: Var) -> Result<Var> {
        let (rows, width) = self.row_len(m);
        if self.values[w.0].len() != rows {
            return Err(Error::shape(format!(
                "scale_rows: {rows} rows but {} weights",
                self.values[w.0].len()
            )));
        }
        let mv = self.values[m.0].data();
        let wv = self.values[w.0].data();
        let out = mv
            .iter()
            .enumerate()
            .map(|(i, x)| x * wv[i / width])
            .collect();
        let t = Tensor::new(self.shape(m).to_vec(), out)?;
        let req = self.req(&[m, w]);
        Ok(self.push(t, Op::ScaleRows(m, w), req))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, w) = self.row_len(x);
        if len == 0 || start + len > rows {
            return Err(Error::shape(format!(
                "slice_rows [{start}, {}) of {rows} rows",
                start + len
            )));
        }
        let data = self.values[x.0].data()[start * w..(start + len) * w].to_vec();
        let mut shape = self.shape(x).to_vec();
        shape[0] = len;
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceRows { x, start }, req))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if len == 0 || start + len > n {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {}) of {n} columns",
                start + len
            )));
        }
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, req))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat_rows: {s:?} incompatible with trailing {tail:?}"
                )));
            }
            rows += s[0];
            data.extend_from_slice(self.values[p.0].data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let req = self.req(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), req))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::shape(format!("concat_cols: {r} rows vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values[p.0].data()[i * w..(i + 1) * w]);
            }
        }
        let req = self.req(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].clone().reshaped(shape)?;
        let req = self.req(&[x]);
        Ok(self.push(t, Op::Reshape(x), req))
    }

    /// Single element as a one-element tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let v = *t
            .data()
            .get(index)
            .ok_or_else(|| Error::index(format!("element {index} of {}", t.len())))?;
        let req = self.req(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, req))
    }

    // -- convolution ----------------------------------------------------------

    /// Valid cross-correlation, stride 1, no padding.
    /// `input` is `[c, h, w]`, `kernels` is `[o, c, kh, kw]`; output is `[o, h-kh+1, w-kw+1]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::shape(format!("conv2d input must be [c,h,w], got {s:?}"))),
        };
        let (o, kc, kh, kw) = match self.shape(kernels) {
            [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
            s => return Err(Error::shape(format!("conv2d kernels must be [o,c,kh,kw], got {s:?}"))),
        };
        if kc != c || kh > h || kw > w {
            return Err(Error::shape(format!(
                "conv2d kernels {:?} do not fit input {:?}",
                self.shape(kernels),
                self.shape(input)
            )));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let x = self.values[input.0].data();
        let k = self.values[kernels.0].data();
        let mut out = vec![0.0; o * oh * ow];
        for f in 0..o {
            for ch in 0..c {
                for a in 0..kh {
                    for b in 0..kw {
                        let kv = k[((f * c + ch) * kh + a) * kw + b];
                        for i in 0..oh {
                            let xrow = &x[(ch * h + i + a) * w + b..];
                            let orow = &mut out[(f * oh + i) * ow..(f * oh + i + 1) * ow];
                            for (j, ov) in orow.iter_mut().enumerate() {
                                *ov += kv * xrow[j];
                            }
                        }
                    }
                }
            }
        }
        let req = self.req(&[input, kernels]);
        Ok(self.push(
            Tensor::new(vec![o, oh, ow], out)?,
            Op::Conv2d { input, kernels },
            req,
        ))
    }

    // -- losses ---------------------------------------------------------------

    /// Batch-mean label-smoothed cross entropy over softmax(logits).
    ///
    /// The target class gets weight `1 - eps`, every other class `eps / (C - 1)`.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if targets.len() != b {
            return Err(Error::shape(format!("{} targets for batch of {b}", targets.len())));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::config(format!("label smoothing {eps} outside [0, 1)")));
        }
        if c < 2 && eps > 0.0 {
            return Err(Error::shape("label smoothing needs at least two classes"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::index(format!("target {bad} out of range for {c} classes")));
        }
        let off = if c > 1 { eps / (c - 1) as f64 } else { 0.0 };
        let src = self.values[logits.0].data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, v) in row.iter().enumerate() {
                let logp = v - lse;
                probs[r * c + j] = logp.exp();
                let q = if j == t { 1.0 - eps } else { off };
                loss -= q * logp;
            }
        }
        let req = self.req(&[logits]);
        Ok(self.push_saved(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                eps,
            },
            req,
            Some(probs),
        ))
    }

    // -- backward -------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients on tape nodes are additive across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        grad_buf(&mut self.grads, loss, 1)[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.requires[idx] {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Runs `backward` and adds parameter-leaf gradients into `store`; frozen parameters are skipped.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        for (&pid, &v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate_grad(pid, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        let Tape {
            values,
            grads,
            requires,
            ops,
            saved,
            ..
        } = self;
        let needs = |v: Var| requires[v.0];
        let out = &values[idx];
        match &ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let n = values[b.0].shape()[1];
                if needs(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    mm_nt_acc(g, values[b.0].data(), ga, m, k, n);
                }
                if needs(*b) {
                    let gb = grad_buf(grads, *b, k * n);
                    mm_tn_acc(values[a.0].data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let ga = grad_buf(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(ops[idx], Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if needs(*b) {
                    let nb = values[b.0].len();
                    let gb = grad_buf(grads, *b, nb);
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % nb] += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                let nb = bv.len();
                if needs(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    for (i, gv) in g.iter().enumerate() {
                        ga[i] += gv * bv[i % nb];
                    }
                }
                if needs(*b) {
                    let gb = grad_buf(grads, *b, nb);
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % nb] += gv * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                if needs(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                if needs(*b) {
                    let gb = grad_buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Relu(a) => {
                let x = values[a.0].data();
                let ga = grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Tanh(a) => {
                let y = out.data();
                let ga = grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Exp(a) => {
                let y = out.data();
                let ga = grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
            Op::Scale(a, c) => {
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Sum(a) => {
                let n = values[a.0].len();
                grad_buf(grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let n = values[a.0].len();
                let s = g[0] / n as f64;
                grad_buf(grads, *a, n).iter_mut().for_each(|x| *x += s);
            }
            Op::SumLast(a) => {
                let n = values[a.0].cols();
                let ga = grad_buf(grads, *a, values[a.0].len());
                for (r, chunk) in ga.chunks_mut(n).enumerate() {
                    chunk.iter_mut().for_each(|x| *x += g[r]);
                }
            }
            Op::Softmax { x, axis } => {
                let shape = values[x.0].shape();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let y = out.data();
                let gx = grad_buf(grads, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let p = base + j * inner;
                            gx[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x } => {
                let n = values[x.0].cols();
                let y = out.data();
                let inv = saved[idx].as_ref().expect("layer norm saves inverse std");
                let gx = grad_buf(grads, *x, y.len());
                for (r, is) in inv.iter().enumerate() {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let mg = gs.iter().sum::<f64>() / n as f64;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] += is * (gs[j] - mg - ys[j] * mgy);
                    }
                }
            }
            Op::GatherRows { x, idx: rows } => {
                let w = out.len() / rows.len();
                let gx = grad_buf(grads, *x, values[x.0].len());
                for (r, &i) in rows.iter().enumerate() {
                    for (a, b) in gx[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *a += b;
                    }
                }
            }
            Op::ScatterAddRows { x, idx: rows } => {
                let n = values[x.0].len();
                let w = n / rows.len();
                let gx = grad_buf(grads, *x, n);
                for (r, &i) in rows.iter().enumerate() {
                    for (a, b) in gx[r * w..(r + 1) * w].iter_mut().zip(&g[i * w..(i + 1) * w]) {
                        *a += b;
                    }
                }
            }
            Op::SegmentSoftmax { x, seg } => {
                let y = out.data();
                let nseg = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; nseg];
                for ((gv, yv), &s) in g.iter().zip(y).zip(seg) {
                    dot[s] += gv * yv;
                }
                let gx = grad_buf(grads, *x, y.len());
                for (i, &s) in seg.iter().enumerate() {
                    gx[i] += y[i] * (g[i] - dot[s]);
                }
            }
            Op::ScaleRows(m, w) => {
                let mv = values[m.0].data();
                let wv = values[w.0].data();
                let width = mv.len() / wv.len();
                if needs(*m) {
                    let gm = grad_buf(grads, *m, mv.len());
                    for i in 0..mv.len() {
                        gm[i] += g[i] * wv[i / width];
                    }
                }
                if needs(*w) {
                    let gw = grad_buf(grads, *w, wv.len());
                    for i in 0..mv.len() {
                        gw[i / width] += g[i] * mv[i];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let w = out.len() / out.shape()[0];
                let gx = grad_buf(grads, *x, values[x.0].len());
                for (a, b) in gx[start * w..start * w + g.len()].iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (values[x.0].shape()[0], values[x.0].shape()[1]);
                let len = out.shape()[1];
                let gx = grad_buf(grads, *x, m * n);
                for i in 0..m {
                    for j in 0..len {
                        gx[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = values[p.0].len();
                    if needs(*p) {
                        let gp = grad_buf(grads, *p, n);
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.shape()[0];
                let n = out.shape()[1];
                let mut col = 0;
                for p in parts {
                    let w = values[p.0].shape()[1];
                    if needs(*p) {
                        let gp = grad_buf(grads, *p, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Conv2d { input, kernels } => {
                let (c, h, w) = {
                    let s = values[input.0].shape();
                    (s[0], s[1], s[2])
                };
                let (o, kh, kw) = {
                    let s = values[kernels.0].shape();
                    (s[0], s[2], s[3])
                };
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let x = values[input.0].data();
                let k = values[kernels.0].data();
                if needs(*input) {
                    let gi = grad_buf(grads, *input, x.len());
                    for f in 0..o {
                        for ch in 0..c {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let kv = k[((f * c + ch) * kh + a) * kw + b];
                                    for i in 0..oh {
                                        for j in 0..ow {
                                            gi[(ch * h + i + a) * w + j + b] += kv * g[(f * oh + i) * ow + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if needs(*kernels) {
                    let gk = grad_buf(grads, *kernels, k.len());
                    for f in 0..o {
                        for ch in 0..c {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let mut s = 0.0;
                                    for i in 0..oh {
                                        for j in 0..ow {
                                            s += x[(ch * h + i + a) * w + j + b] * g[(f * oh + i) * ow + j];
                                        }
                                    }
                                    gk[((f * c + ch) * kh + a) * kw + b] += s;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, eps } => {
                let probs = saved[idx].as_ref().expect("cross entropy saves probabilities");
                let b = targets.len();
                let c = probs.len() / b;
                let off = if c > 1 { eps / (c - 1) as f64 } else { 0.0 };
                let scale = g[0] / b as f64;
                let gl = grad_buf(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let q = if j == t { 1.0 - eps } else { off };
                        gl[r * c + j] += scale * (probs[r * c + j] - q);
                    }
                }
            }
            Op::Pick { x, index } => {
                let n = values[x.0].len();
                grad_buf(grads, *x, n)[*index] += g[0];
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}
