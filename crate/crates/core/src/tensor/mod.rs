//! Reverse-mode autodiff on dense row-major tensors.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] replays
//! the nodes in reverse id order, which is a topological order by
//! construction. Gradient accumulation therefore happens in a fixed order and
//! two backward passes over identical inputs are bit-identical.
//!
//! Element precision is a construction parameter: the engine works for `f32`
//! and `f64`. All tests and gradient checks run in `f64`.

pub mod gradcheck;
pub mod kernels;

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Element type of tensors: `f32` or `f64`.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}
impl_scalar!(f32);
impl_scalar!(f64);

/// Dense row-major n-dimensional value.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || len != data.len() {
            return Err(Error::Shape {
                op: "Array::new",
                detail: format!("shape {:?} does not describe {} elements", shape, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self { shape, data: vec![T::ZERO; len] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count for a 2-d array.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count for a 2-d array.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// y = a · bᵀ with b stored row-major [n×k]; used for attention logits.
    MatmulNt { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, inv_std: Vec<T>, normalized: Vec<T> },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatCols { parts: Vec<(Var, usize)> },
    SliceCols { x: Var, start: usize },
    ScatterMean { msgs: Var, targets: Vec<usize>, counts: Vec<usize> },
    Mse { pred: Var, target: Var },
    Sum { x: Var },
}

struct Node<T> {
    op: Op<T>,
    value: Array<T>,
    requires_grad: bool,
}

/// Gradients keyed by [`Var`]; only vars on a `requires_grad` path have one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Wengert list: append-only operation record plus stored activations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op<T>, value: Array<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Array::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape { op, detail: format!("expected 2-d, got {:?}", s) });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner extents differ: {ka} vs {kb}"),
            });
        }
        let mut out = Array::zeros([m, n]);
        kernels::mm_nn(self.value(a).data(), self.value(b).data(), m, ka, n, out.data_mut());
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Matmul { a, b }, out, rg))
    }

    /// y = a · bᵀ for b stored [n×k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul_nt",
                detail: format!("inner extents differ: {ka} vs {kb}"),
            });
        }
        let mut out = Array::zeros([m, n]);
        kernels::mm_nt(self.value(a).data(), self.value(b).data(), m, ka, n, out.data_mut());
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatmulNt { a, b }, out, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {:?}", shape),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = xv[base];
                for l in 1..len {
                    mx = mx.max(xv[base + l * inner]);
                }
                let mut sum = T::ZERO;
                for l in 0..len {
                    let e = (xv[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Softmax { x, axis }, Array::new(shape, out)?, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().ok_or(Error::Shape {
            op: "layer_norm",
            detail: "0-d input".into(),
        })?;
        if self.value(gain).len() != h || self.value(bias).len() != h {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gain/bias length {}/{} does not match last extent {h}",
                    self.value(gain).len(),
                    self.value(bias).len()
                ),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / h;
        let inv_h = T::ONE / T::from_f64(h as f64);
        let mut out = vec![T::ZERO; xv.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let mut normalized = vec![T::ZERO; xv.len()];
        for r in 0..rows {
            let row = &xv[r * h..(r + 1) * h];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_h;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_h;
            let is = T::ONE / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..h {
                let nh = (row[c] - mean) * is;
                normalized[r * h + c] = nh;
                out[r * h + c] = nh * gv[c] + bv[c];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm { x, gain, bias, inv_std, normalized },
            Array::new(shape, out)?,
            rg,
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out: Vec<T> = self.value(x).data().iter().map(|&v| gelu_val(v)).collect();
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Gelu { x }, Array::new(shape, out)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, Array::new(shape, out)?, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, Array::new(shape, out)?, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Scale { x, c }, Array::new(shape, out)?, rg))
    }

    /// Broadcasts a length-h vector over the rows of a 2-d array (x + row).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, h) = self.dims2(x, "add_row")?;
        self.check_row(row, h, "add_row")?;
        let rv = self.value(row).data().to_vec();
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * h];
        for r in 0..n {
            for c in 0..h {
                out[r * h + c] = xv[r * h + c] + rv[c];
            }
        }
        let rg = self.needs(&[x, row]);
        Ok(self.push(Op::AddRow { x, row }, Array::new([n, h], out)?, rg))
    }

    /// Broadcasts a length-h vector over the rows of a 2-d array (x ⊙ row).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, h) = self.dims2(x, "mul_row")?;
        self.check_row(row, h, "mul_row")?;
        let rv = self.value(row).data().to_vec();
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * h];
        for r in 0..n {
            for c in 0..h {
                out[r * h + c] = xv[r * h + c] * rv[c];
            }
        }
        let rg = self.needs(&[x, row]);
        Ok(self.push(Op::MulRow { x, row }, Array::new([n, h], out)?, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, h) = self.dims2(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::InvalidArg("gather_rows with empty index list".into()));
        }
        for &i in idx {
            if i >= n {
                return Err(Error::Index { index: i, bound: n });
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; idx.len() * h];
        for (r, &i) in idx.iter().enumerate() {
            out[r * h..(r + 1) * h].copy_from_slice(&xv[i * h..(i + 1) * h]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Op::GatherRows { x, idx: idx.to_vec() }, Array::new([idx.len(), h], out)?, rg))
    }

    /// Concatenates 2-d arrays with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_cols with no parts".into()));
        }
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (np, w) = self.dims2(p, "concat_cols")?;
            if np != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row counts differ: {n} vs {np}"),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::ZERO; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..n {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.needs(parts);
        let parts: Vec<(Var, usize)> = parts.iter().copied().zip(widths).collect();
        Ok(self.push(Op::ConcatCols { parts }, Array::new([n, total], out)?, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, h) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > h {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("slice [{start}, {}) out of width {h}", start + len),
            });
        }
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * len];
        for r in 0..n {
            out[r * len..(r + 1) * len].copy_from_slice(&xv[r * h + start..r * h + start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SliceCols { x, start }, Array::new([n, len], out)?, rg))
    }

    /// Row j of the output is the mean of messages with target j; rows with no
    /// incoming message stay zero.
    pub fn scatter_mean(&mut self, msgs: Var, targets: &[usize], n_out: usize) -> Result<Var> {
        let (e, h) = self.dims2(msgs, "scatter_mean")?;
        if targets.len() != e {
            return Err(Error::Shape {
                op: "scatter_mean",
                detail: format!("{} targets for {e} messages", targets.len()),
            });
        }
        for &t in targets {
            if t >= n_out {
                return Err(Error::Index { index: t, bound: n_out });
            }
        }
        let mv = self.value(msgs).data();
        let mut out = vec![T::ZERO; n_out * h];
        let mut counts = vec![0usize; n_out];
        for (r, &t) in targets.iter().enumerate() {
            counts[t] += 1;
            for c in 0..h {
                out[t * h + c] += mv[r * h + c];
            }
        }
        for (t, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let inv = T::ONE / T::from_f64(cnt as f64);
                for c in 0..h {
                    out[t * h + c] *= inv;
                }
            }
        }
        let rg = self.needs(&[msgs]);
        Ok(self.push(
            Op::ScatterMean { msgs, targets: targets.to_vec(), counts },
            Array::new([n_out, h], out)?,
            rg,
        ))
    }

    /// Mean over all entries of the squared difference; scalar output.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary_same_shape(pred, target, "mse")?;
        let pv = self.value(pred).data();
        let tv = self.value(target).data();
        let mut acc = T::ZERO;
        for (&p, &t) in pv.iter().zip(tv) {
            let d = p - t;
            acc += d * d;
        }
        let out = acc / T::from_f64(pv.len() as f64);
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Op::Mse { pred, target }, Array::scalar(out), rg))
    }

    /// Sum of all entries; scalar output.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Sum { x }, Array::scalar(acc), rg))
    }

    /// x·W + b in one call.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn check_row(&self, row: Var, h: usize, op: &'static str) -> Result<()> {
        let s = self.shape(row);
        let ok = s == [h] || s == [1, h];
        if !ok {
            return Err(Error::Shape {
                op,
                detail: format!("row shape {:?} does not broadcast over width {h}", s),
            });
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss. Nodes are visited in descending id
    /// order (a topological order), so accumulation order is fixed and the
    /// result is bit-identical across runs.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::NonScalarLoss { len: n });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let accum = |grads: &mut [Option<Vec<T>>], v: Var, contrib: &[T]| {
            let slot = grads[v.0].get_or_insert_with(|| vec![T::ZERO; self.value(v).len()]);
            for (s, &c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    kernels::mm_nt(g, self.value(*b).data(), m, n, k, &mut da);
                    accum(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    kernels::mm_tn(self.value(*a).data(), g, m, k, n, &mut db);
                    accum(grads, *b, &db);
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.requires_grad(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    kernels::mm_nn(g, self.value(*b).data(), m, n, k, &mut da);
                    accum(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::ZERO; n * k];
                    kernels::mm_tn(g, self.value(*a).data(), m, n, k, &mut db);
                    accum(grads, *b, &db);
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires_grad(*x) {
                    let y = node.value.data();
                    let shape = node.value.shape();
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let mut dx = vec![T::ZERO; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::ZERO;
                            for l in 0..len {
                                let p = base + l * inner;
                                dot += g[p] * y[p];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                dx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, inv_std, normalized } => {
                let h = self.value(*gain).len();
                let rows = normalized.len() / h;
                let gv = self.value(*gain).data();
                let inv_h = T::ONE / T::from_f64(h as f64);
                if self.requires_grad(*x) {
                    let mut dx = vec![T::ZERO; normalized.len()];
                    for r in 0..rows {
                        let mut mean_gd = T::ZERO;
                        let mut mean_gdn = T::ZERO;
                        for c in 0..h {
                            let gd = g[r * h + c] * gv[c];
                            mean_gd += gd;
                            mean_gdn += gd * normalized[r * h + c];
                        }
                        mean_gd *= inv_h;
                        mean_gdn *= inv_h;
                        for c in 0..h {
                            let gd = g[r * h + c] * gv[c];
                            dx[r * h + c] =
                                (gd - mean_gd - normalized[r * h + c] * mean_gdn) * inv_std[r];
                        }
                    }
                    accum(grads, *x, &dx);
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![T::ZERO; h];
                    for r in 0..rows {
                        for c in 0..h {
                            dg[c] += g[r * h + c] * normalized[r * h + c];
                        }
                    }
                    accum(grads, *gain, &dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::ZERO; h];
                    for r in 0..rows {
                        for c in 0..h {
                            db[c] += g[r * h + c];
                        }
                    }
                    accum(grads, *bias, &db);
                }
            }
            Op::Gelu { x } => {
                if self.requires_grad(*x) {
                    let dx: Vec<T> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| gelu_grad(v) * gi)
                        .collect();
                    accum(grads, *x, &dx);
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    accum(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    accum(grads, *b, g);
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let da: Vec<T> =
                        g.iter().zip(self.value(*b).data()).map(|(&gi, &bv)| gi * bv).collect();
                    accum(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let db: Vec<T> =
                        g.iter().zip(self.value(*a).data()).map(|(&gi, &av)| gi * av).collect();
                    accum(grads, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                if self.requires_grad(*x) {
                    let dx: Vec<T> = g.iter().map(|&gi| gi * *c).collect();
                    accum(grads, *x, &dx);
                }
            }
            Op::AddRow { x, row } => {
                let (n, h) = (self.shape(*x)[0], self.shape(*x)[1]);
                if self.requires_grad(*x) {
                    accum(grads, *x, g);
                }
                if self.requires_grad(*row) {
                    let mut dr = vec![T::ZERO; h];
                    for r in 0..n {
                        for c in 0..h {
                            dr[c] += g[r * h + c];
                        }
                    }
                    accum(grads, *row, &dr);
                }
            }
            Op::MulRow { x, row } => {
                let (n, h) = (self.shape(*x)[0], self.shape(*x)[1]);
                let rv = self.value(*row).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![T::ZERO; n * h];
                    for r in 0..n {
                        for c in 0..h {
                            dx[r * h + c] = g[r * h + c] * rv[c];
                        }
                    }
                    accum(grads, *x, &dx);
                }
                if self.requires_grad(*row) {
                    let xv = self.value(*x).data();
                    let mut dr = vec![T::ZERO; h];
                    for r in 0..n {
                        for c in 0..h {
                            dr[c] += g[r * h + c] * xv[r * h + c];
                        }
                    }
                    accum(grads, *row, &dr);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.requires_grad(*x) {
                    let h = self.shape(*x)[1];
                    let mut dx = vec![T::ZERO; self.value(*x).len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..h {
                            dx[i * h + c] += g[r * h + c];
                        }
                    }
                    accum(grads, *x, &dx);
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let n = node.value.shape()[0];
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.requires_grad(p) {
                        let mut dp = vec![T::ZERO; n * w];
                        for r in 0..n {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accum(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires_grad(*x) {
                    let (n, h) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let len = node.value.shape()[1];
                    let mut dx = vec![T::ZERO; n * h];
                    for r in 0..n {
                        for c in 0..len {
                            dx[r * h + start + c] += g[r * len + c];
                        }
                    }
                    accum(grads, *x, &dx);
                }
            }
            Op::ScatterMean { msgs, targets, counts } => {
                if self.requires_grad(*msgs) {
                    let h = self.shape(*msgs)[1];
                    let mut dm = vec![T::ZERO; self.value(*msgs).len()];
                    for (r, &t) in targets.iter().enumerate() {
                        let inv = T::ONE / T::from_f64(counts[t] as f64);
                        for c in 0..h {
                            dm[r * h + c] = g[t * h + c] * inv;
                        }
                    }
                    accum(grads, *msgs, &dm);
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let tv = self.value(*target).data();
                let coef = g[0] * T::from_f64(2.0 / pv.len() as f64);
                if self.requires_grad(*pred) {
                    let dp: Vec<T> =
                        pv.iter().zip(tv).map(|(&p, &t)| coef * (p - t)).collect();
                    accum(grads, *pred, &dp);
                }
                if self.requires_grad(*target) {
                    let dt: Vec<T> =
                        pv.iter().zip(tv).map(|(&p, &t)| -coef * (p - t)).collect();
                    accum(grads, *target, &dt);
                }
            }
            Op::Sum { x } => {
                if self.requires_grad(*x) {
                    let dx = vec![g[0]; self.value(*x).len()];
                    accum(grads, *x, &dx);
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}
