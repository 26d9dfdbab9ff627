// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode differentiation over dense arrays.
//!
//! Every primitive appends one record to the [`Tape`] holding its output value
//! and the handles of its inputs. [`Tape::backward`] walks the records in
//! reverse execution order and accumulates adjoints only for records that
//! (transitively) depend on a trainable leaf, so frozen weights bound with
//! [`Tape::constant`] never get a gradient buffer.
//!
//! There is no broadcasting: binary elementwise primitives need equal shapes,
//! and the only mixed-shape product is [`Tape::scale_by`] (array times a
//! one-element array).

use std::sync::atomic::{AtomicU32, Ordering};

use super::array::Array;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Index(Var, usize),
    Slice(Var, usize),
    Reshape(Var),
    Sigmoid(Var),
    /// Input and its elementwise sigmoid.
    Swish(Var, Vec<f64>),
    Rsqrt(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Norm(Var),
    Normalize(Var, f64),
    Diag(Var),
    Upsample2x(Var),
    AvgPool(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Ordered record of primitive evaluations.
#[derive(Debug, Clone)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of a scalar root with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index()).and_then(|g| g.as_ref())
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    // One exp of a non-positive argument; the sign picks the branchless form.
    let e = (-x.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if x >= 0.0 { r } else { e * r }
}

#[cfg(test)]
pub(crate) fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of swish at `x` given `s = sigmoid(x)`.
fn swish_grad_at(x: f64, s: f64) -> f64 {
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
fn swish_grad(x: f64) -> f64 {
    swish_grad_at(x, sigmoid(x))
}

/// Source taps for 2x bilinear upsampling with half-pixel centers and edge
/// clamping: output `2i` reads `0.75*x[i] + 0.25*x[i-1]`, output `2i+1` reads
/// `0.75*x[i] + 0.25*x[i+1]`.
fn upsample_taps(n: usize, o: usize) -> [(usize, f64); 2] {
    let i = o / 2;
    let j = if o % 2 == 0 {
        i.saturating_sub(1)
    } else {
        (i + 1).min(n - 1)
    };
    [(i, 0.75), (j, 0.25)]
}

fn upsample_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    // Along the width first, then along the height.
    let mut tmp = vec![0.0; c * h * w2];
    for row in 0..c * h {
        let src = &x[row * w..(row + 1) * w];
        let dst = &mut tmp[row * w2..(row + 1) * w2];
        for (o, d) in dst.iter_mut().enumerate() {
            let [(a, wa), (b, wb)] = upsample_taps(w, o);
            *d = wa * src[a] + wb * src[b];
        }
    }
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for o in 0..h2 {
            let [(a, wa), (b, wb)] = upsample_taps(h, o);
            let ra = &tmp[(ch * h + a) * w2..(ch * h + a + 1) * w2];
            let rb = &tmp[(ch * h + b) * w2..(ch * h + b + 1) * w2];
            let dst = &mut out[(ch * h2 + o) * w2..(ch * h2 + o + 1) * w2];
            for k in 0..w2 {
                dst[k] = wa * ra[k] + wb * rb[k];
            }
        }
    }
    out
}

fn upsample_adjoint(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut tmp = vec![0.0; c * h * w2];
    for ch in 0..c {
        for o in 0..h2 {
            let [(a, wa), (b, wb)] = upsample_taps(h, o);
            let src = &g[(ch * h2 + o) * w2..(ch * h2 + o + 1) * w2];
            for k in 0..w2 {
                tmp[(ch * h + a) * w2 + k] += wa * src[k];
                tmp[(ch * h + b) * w2 + k] += wb * src[k];
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for row in 0..c * h {
        let src = &tmp[row * w2..(row + 1) * w2];
        let dst = &mut out[row * w..(row + 1) * w];
        for (o, &gv) in src.iter().enumerate() {
            let [(a, wa), (b, wb)] = upsample_taps(w, o);
            dst[a] += wa * gv;
            dst[b] += wb * gv;
        }
    }
    out
}

fn avg_pool_forward(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut out[(ch * ho + y / f) * wo..(ch * ho + y / f + 1) * wo];
            for (xi, &v) in src.iter().enumerate() {
                dst[xi / f] += v * norm;
            }
        }
    }
    out
}

fn avg_pool_adjoint(g: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = &g[(ch * ho + y / f) * wo..(ch * ho + y / f + 1) * wo];
            let dst = &mut out[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (xi, d) in dst.iter_mut().enumerate() {
                *d = src[xi / f] * norm;
            }
        }
    }
    out
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators so the loop vectorizes.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if n == 1 {
        return (0..m).map(|i| dot_slices(&a[i * k..(i + 1) * k], b)).collect();
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `v * 0` is NaN exactly when `v` is not finite. Eight independent lanes
/// keep the reduction vectorizable.
fn all_finite(data: &[f64]) -> bool {
    let mut acc = [0.0f64; 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v * 0.0;
        }
    }
    acc.iter().chain(tail).fold(0.0, |s, v| s + v * 0.0).is_finite()
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / last.max(1), last)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn check(&self, v: Var, op: &'static str) -> Result<&Node> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Contract(format!("{op}: variable is not on this tape")));
        }
        Ok(&self.nodes[v.index()])
    }

    fn push(&mut self, op_name: &'static str, value: Array, op: Op, needs_grad: bool) -> Result<Var> {
        if !all_finite(value.data()) {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        let index = u32::try_from(self.nodes.len())
            .map_err(|_| Error::Contract("tape overflow".into()))?;
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Ok(Var { tape: self.id, index })
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Array, trainable: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            needs_grad: trainable,
        });
        Var { tape: self.id, index }
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.index()].trainable
    }

    /// `(m,k)·(k,n) -> (m,n)` or `(m,k)·(k,) -> (m,)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.check(a, "matmul")?.value, &self.check(b, "matmul")?.value);
        let (sa, sb) = (av.shape(), bv.shape());
        let ok = sa.len() == 2 && (sb.len() == 1 || sb.len() == 2) && sa[1] == sb[0];
        if !ok {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let out_shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let data = matmul_forward(av.data(), bv.data(), m, k, n);
        let g = self.grad_of(&[a, b]);
        self.push("matmul", Array::from_parts(out_shape, data), Op::MatMul(a, b), g)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.check(a, op)?.value.shape(), self.check(b, op)?.value.shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::from_parts(av.shape().to_vec(), data);
        let g = self.grad_of(&[a, b]);
        self.push(name, value, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product of equal-shaped arrays.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// `scale * x` elementwise.
    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xv = &self.check(x, "affine")?.value;
        let value = xv.map(|v| scale * v + shift);
        let g = self.grad_of(&[x]);
        self.push("affine", value, Op::Affine(x, scale), g)
    }

    /// Array times a one-element array.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = &self.check(s, "scale_by")?.value;
        if !sv.is_scalar() {
            return Err(Error::dim("scale_by", format!("factor has shape {:?}", sv.shape())));
        }
        let k = sv.item();
        let value = self.check(x, "scale_by")?.value.map(|v| v * k);
        let g = self.grad_of(&[x, s]);
        self.push("scale_by", value, Op::ScaleBy(x, s), g)
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        let lead = self.check(parts[0], "concat")?.value.shape().split_last().map(|(_, l)| l.to_vec());
        let lead = lead.unwrap_or_default();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.check(p, "concat")?.value.shape();
            let (last, l) = s.split_last().expect("arrays have at least one axis");
            if l != lead.as_slice() {
                let shapes: Vec<_> = parts.iter().map(|&q| self.shape(q).to_vec()).collect();
                return Err(Error::dim("concat", format!("incompatible shapes {shapes:?}")));
            }
            widths.push(*last);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let g = self.grad_of(parts);
        self.push("concat", Array::from_parts(shape, data), Op::Concat(parts.to_vec()), g)
    }

    /// Stacks equal-shaped arrays along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("stack", "no inputs"));
        }
        let inner = self.check(parts[0], "stack")?.value.shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            let v = &self.check(p, "stack")?.value;
            if v.shape() != inner.as_slice() {
                return Err(Error::dim("stack", format!("{:?} vs {:?}", v.shape(), inner)));
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let g = self.grad_of(parts);
        self.push("stack", Array::from_parts(shape, data), Op::Stack(parts.to_vec()), g)
    }

    /// Slice `i` along the first axis.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = &self.check(x, "index")?.value;
        if xv.ndim() < 2 {
            return Err(Error::dim("index", format!("cannot index into {:?}", xv.shape())));
        }
        if i >= xv.shape()[0] {
            return Err(Error::Index {
                index: i,
                len: xv.shape()[0],
            });
        }
        let inner: Vec<usize> = xv.shape()[1..].to_vec();
        let w: usize = inner.iter().product();
        let value = Array::from_parts(inner, xv.data()[i * w..(i + 1) * w].to_vec());
        let g = self.grad_of(&[x]);
        self.push("index", value, Op::Index(x, i), g)
    }

    /// Elements `start..end` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = &self.check(x, "slice")?.value;
        if xv.ndim() != 1 || start >= end || end > xv.len() {
            return Err(Error::dim("slice", format!("{start}..{end} of {:?}", xv.shape())));
        }
        let value = Array::from_parts(vec![end - start], xv.data()[start..end].to_vec());
        let g = self.grad_of(&[x]);
        self.push("slice", value, Op::Slice(x, start), g)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(x, "reshape")?.value.reshaped(shape.to_vec())?;
        let g = self.grad_of(&[x]);
        self.push("reshape", value, Op::Reshape(x), g)
    }

    fn unary(&mut self, x: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.check(x, name)?.value.map(f);
        let g = self.grad_of(&[x]);
        self.push(name, value, op, g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", Op::Sigmoid(x), sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let xv = &self.check(x, "swish")?.value;
        let sig: Vec<f64> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let data = xv.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let value = Array::from_parts(xv.shape().to_vec(), data);
        let g = self.grad_of(&[x]);
        let op = Op::Swish(x, if g { sig } else { Vec::new() });
        self.push("swish", value, op, g)
    }

    /// `1 / sqrt(x + eps)`, elementwise.
    pub fn rsqrt(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(x, "rsqrt", Op::Rsqrt(x), move |v| 1.0 / (v + eps).sqrt())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", Op::Square(x), |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", Op::Abs(x), f64::abs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x, "sum")?.value.data().iter().sum();
        let g = self.grad_of(&[x]);
        self.push("sum", Array::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.check(x, "mean")?.value;
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let g = self.grad_of(&[x]);
        self.push("mean", Array::scalar(m), Op::Mean(x), g)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let d = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        let g = self.grad_of(&[a, b]);
        self.push("dot", Array::scalar(d), Op::Dot(a, b), g)
    }

    /// Euclidean norm of all elements.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x, "norm")?.value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = self.grad_of(&[x]);
        self.push("norm", Array::scalar(n), Op::Norm(x), g)
    }

    /// `x / max(‖x‖, floor)`.
    pub fn normalize(&mut self, x: Var, floor: f64) -> Result<Var> {
        let xv = &self.check(x, "normalize")?.value;
        let n = xv.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
        let value = xv.map(|v| v / n);
        let g = self.grad_of(&[x]);
        self.push("normalize", value, Op::Normalize(x, floor), g)
    }

    /// Square diagonal matrix from a vector.
    pub fn diag(&mut self, v: Var) -> Result<Var> {
        let vv = &self.check(v, "diag")?.value;
        if vv.ndim() != 1 {
            return Err(Error::dim("diag", format!("expected vector, got {:?}", vv.shape())));
        }
        let n = vv.len();
        let mut data = vec![0.0; n * n];
        for (i, &x) in vv.data().iter().enumerate() {
            data[i * n + i] = x;
        }
        let g = self.grad_of(&[v]);
        self.push("diag", Array::from_parts(vec![n, n], data), Op::Diag(v), g)
    }

    /// Bilinear 2x upsampling of a `(C,H,W)` array.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = &self.check(x, "upsample2x")?.value;
        let [c, h, w] = match *xv.shape() {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::dim("upsample2x", format!("expected (C,H,W), got {:?}", xv.shape()))),
        };
        let data = upsample_forward(xv.data(), c, h, w);
        let g = self.grad_of(&[x]);
        self.push("upsample2x", Array::from_parts(vec![c, 2 * h, 2 * w], data), Op::Upsample2x(x), g)
    }

    /// Non-overlapping `factor x factor` mean pooling of a `(C,H,W)` array.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xv = &self.check(x, "avg_pool")?.value;
        let [c, h, w] = match *xv.shape() {
            [c, h, w] if factor > 0 && h % factor == 0 && w % factor == 0 => [c, h, w],
            _ => {
                return Err(Error::dim(
                    "avg_pool",
                    format!("cannot pool {:?} by {factor}", xv.shape()),
                ))
            }
        };
        let data = avg_pool_forward(xv.data(), c, h, w, factor);
        let g = self.grad_of(&[x]);
        self.push("avg_pool", Array::from_parts(vec![c, h / factor, w / factor], data), Op::AvgPool(x, factor), g)
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.check(root, "backward")?.value;
        if !rv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.index() + 1];
        let mut out: Vec<Option<Array>> = vec![None; self.nodes.len()];
        if self.nodes[root.index()].needs_grad {
            grads[root.index()] = Some(vec![1.0]);
        }
        for i in (0..=root.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.trainable {
                out[i] = Some(Array::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.index()].needs_grad;
        let val = |v: Var| nodes[v.index()].value.data();
        // Adds `f(j)` into the adjoint of `v` for every element `j`.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl Fn(usize) -> f64) {
            let slot = grads[v.index()].get_or_insert_with(|| vec![0.0; len]);
            for (j, s) in slot.iter_mut().enumerate() {
                *s += f(j);
            }
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.index()].value.shape(), nodes[b.index()].value.shape());
                let (m, k) = (sa[0], sa[1]);
                let n = if sb.len() == 2 { sb[1] } else { 1 };
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) && n == 1 {
                    let slot = grads[a.index()].get_or_insert_with(|| vec![0.0; m * k]);
                    for i in 0..m {
                        let gi = g[i];
                        for (s, &bv) in slot[i * k..(i + 1) * k].iter_mut().zip(bv) {
                            *s += gi * bv;
                        }
                    }
                } else if needs(*a) {
                    let slot = grads[a.index()].get_or_insert_with(|| vec![0.0; m * k]);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            slot[i * k + p] += dot_slices(gi, brow);
                        }
                    }
                }
                if needs(*b) && n == 1 {
                    let slot = grads[b.index()].get_or_insert_with(|| vec![0.0; k]);
                    for i in 0..m {
                        let gi = g[i];
                        for (s, &a) in slot.iter_mut().zip(&av[i * k..(i + 1) * k]) {
                            *s += gi * a;
                        }
                    }
                } else if needs(*b) {
                    let slot = grads[b.index()].get_or_insert_with(|| vec![0.0; k * n]);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let srow = &mut slot[p * n..(p + 1) * n];
                            for (s, &gv) in srow.iter_mut().zip(gi) {
                                *s += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(grads, v, g.len(), |j| g[j]);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(grads, *a, g.len(), |j| g[j]);
                }
                if needs(*b) {
                    acc(grads, *b, g.len(), |j| -g[j]);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    acc(grads, *a, g.len(), |j| g[j] * bv[j]);
                }
                if needs(*b) {
                    acc(grads, *b, g.len(), |j| g[j] * av[j]);
                }
            }
            Op::Affine(x, scale) => {
                if needs(*x) {
                    acc(grads, *x, g.len(), |j| g[j] * scale);
                }
            }
            Op::ScaleBy(x, s) => {
                let k = val(*s)[0];
                if needs(*x) {
                    acc(grads, *x, g.len(), |j| g[j] * k);
                }
                if needs(*s) {
                    let d: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                    acc(grads, *s, 1, |_| d);
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| split_last(nodes[p.index()].value.shape()).1).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if needs(p) {
                        let off = offset;
                        acc(grads, p, rows * w, |j| g[(j / w) * total + off + j % w]);
                    }
                    offset += w;
                }
            }
            Op::Stack(parts) => {
                let w = g.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    if needs(p) {
                        acc(grads, p, w, |j| g[i * w + j]);
                    }
                }
            }
            Op::Index(x, i) => {
                if needs(*x) {
                    let n = nodes[x.index()].value.len();
                    let w = g.len();
                    let slot = grads[x.index()].get_or_insert_with(|| vec![0.0; n]);
                    for (s, &gv) in slot[i * w..(i + 1) * w].iter_mut().zip(g) {
                        *s += gv;
                    }
                }
            }
            Op::Slice(x, start) => {
                if needs(*x) {
                    let n = nodes[x.index()].value.len();
                    let slot = grads[x.index()].get_or_insert_with(|| vec![0.0; n]);
                    for (s, &gv) in slot[*start..*start + g.len()].iter_mut().zip(g) {
                        *s += gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    acc(grads, *x, g.len(), |j| g[j]);
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    acc(grads, *x, g.len(), |j| g[j] * y[j] * (1.0 - y[j]));
                }
            }
            Op::Swish(x, sig) => {
                if needs(*x) {
                    let xv = val(*x);
                    acc(grads, *x, g.len(), |j| g[j] * swish_grad_at(xv[j], sig[j]));
                }
            }
            Op::Rsqrt(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    acc(grads, *x, g.len(), |j| -0.5 * g[j] * y[j] * y[j] * y[j]);
                }
            }
            Op::Square(x) => {
                if needs(*x) {
                    let xv = val(*x);
                    acc(grads, *x, g.len(), |j| 2.0 * xv[j] * g[j]);
                }
            }
            Op::Abs(x) => {
                if needs(*x) {
                    let xv = val(*x);
                    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                    acc(grads, *x, g.len(), |j| sign(xv[j]) * g[j]);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = nodes[x.index()].value.len();
                    acc(grads, *x, n, |_| g[0]);
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = nodes[x.index()].value.len();
                    let d = g[0] / n as f64;
                    acc(grads, *x, n, |_| d);
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    acc(grads, *a, av.len(), |j| g[0] * bv[j]);
                }
                if needs(*b) {
                    acc(grads, *b, bv.len(), |j| g[0] * av[j]);
                }
            }
            Op::Norm(x) => {
                if needs(*x) {
                    let n = node.value.item();
                    let xv = val(*x);
                    if n > 0.0 {
                        acc(grads, *x, xv.len(), |j| g[0] * xv[j] / n);
                    } else {
                        acc(grads, *x, xv.len(), |_| 0.0);
                    }
                }
            }
            Op::Normalize(x, floor) => {
                if needs(*x) {
                    let xv = val(*x);
                    let y = node.value.data();
                    let raw = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw > *floor {
                        // (I - y yᵀ) g / ‖x‖
                        let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        acc(grads, *x, xv.len(), |j| (g[j] - y[j] * yg) / raw);
                    } else {
                        acc(grads, *x, xv.len(), |j| g[j] / floor);
                    }
                }
            }
            Op::Diag(v) => {
                if needs(*v) {
                    let n = nodes[v.index()].value.len();
                    acc(grads, *v, n, |i| g[i * n + i]);
                }
            }
            Op::Upsample2x(x) => {
                if needs(*x) {
                    let s = nodes[x.index()].value.shape();
                    let back = upsample_adjoint(g, s[0], s[1], s[2]);
                    acc(grads, *x, back.len(), |j| back[j]);
                }
            }
            Op::AvgPool(x, f) => {
                if needs(*x) {
                    let s = nodes[x.index()].value.shape();
                    let back = avg_pool_adjoint(g, s[0], s[1], s[2], *f);
                    acc(grads, *x, back.len(), |j| back[j]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecvar(t: &mut Tape, v: &[f64]) -> Var {
        t.param(Array::vector(v.to_vec()))
    }

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0), 0.0);
        // -1 / (1 + e)
        let expected = -1.0 / (1.0 + std::f64::consts::E);
        assert!((swish(-1.0) - expected).abs() < 1e-15);
        assert!((swish(-1.0) + 0.268_941_421_369_995).abs() < 1e-12);
    }

    #[test]
    fn swish_derivative_continuous_at_zero() {
        // swish''(0) = 1/2, so the one-sided slopes differ by ~eps and the gap
        // vanishes linearly as eps -> 0.
        let fd = |x: f64| (swish(x + 1e-8) - swish(x - 1e-8)) / 2e-8;
        for eps in [1e-2, 1e-3, 1e-4] {
            let gap = (swish_grad(eps) - swish_grad(-eps)).abs();
            assert!((gap - eps).abs() < 1e-3 * eps, "eps={eps} gap={gap}");
            assert!((fd(eps) - fd(-eps) - gap).abs() < 1e-6);
        }
        assert!((swish_grad(1e-7) - swish_grad(-1e-7)).abs() < 1e-6);
        assert!((swish_grad(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn concat_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array::vector(vec![1.0, 2.0]));
        let c = t.constant(Array::vector(vec![3.0]));
        let y = t.concat(&[a, c]).unwrap();
        assert_eq!(t.shape(y), &[3]);
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0]);
        let m = t.constant(Array::zeros([2, 2]));
        let err = t.concat(&[a, m]).unwrap_err();
        assert!(err.to_string().contains("concat"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = vecvar(&mut t, &[0.3, -2.0, 5.0]);
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_gradient() {
        let mut t = Tape::new();
        let p = vecvar(&mut t, &[1.0, 1.0]);
        let z = t.constant(Array::zeros([2]));
        let d = t.sub(p, z).unwrap();
        let sq = t.square(d).unwrap();
        let m = t.mean(sq).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let p = vecvar(&mut t, &[1.0, 2.0]);
        let y = t.square(p).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_variables_are_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.constant(Array::scalar(1.0));
        assert!(t2.square(a).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.constant(Array::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = vecvar(&mut t, &[1.0, -1.0]);
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros([2, 3]));
        let b = t.constant(Array::zeros([2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Array::scalar(1e300));
        let b = t.constant(Array::scalar(1e300));
        let y = t.mul(a, b);
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }

    #[test]
    fn upsample_preserves_constants_and_pool_inverts_mean() {
        let mut t = Tape::new();
        let x = t.constant(Array::filled([2, 3, 3], 1.5));
        let u = t.upsample2x(x).unwrap();
        assert_eq!(t.shape(u), &[2, 6, 6]);
        assert!(t.value(u).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        let p = t.avg_pool(u, 2).unwrap();
        assert_eq!(t.shape(p), &[2, 3, 3]);
        assert!(t.avg_pool(u, 4).is_err());
    }
}
