//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed on its [`Var`] handles in
//! execution order, so the recorded list is already topologically sorted.
//! [`Graph::backward`] walks it once in reverse and leaves a gradient on every
//! leaf that was created with `requires_grad`. A graph supports exactly one
//! backward pass; build a new graph for the next forward pass.
//!
//! Every operation checks that its output is finite and fails with
//! [`Error::NonFinite`] otherwise, so a diverging step aborts instead of
//! silently corrupting parameters.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ReduceIndex};
use crate::tensor::{gemm, numel, MatRef, Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: usize,
}

/// Reduction kinds accepted by [`Graph::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Sum,
    L2Norm,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    PowScalar(Var, T),
    Log10(Var),
    Ln(Var),
    Clamp(Var, T, T),
    LeakyRelu(Var, T),
    LeakyReluTangent { x: Var, dx: Var, slope: T },
    Sigmoid(Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Tile(Var),
    Reduce { x: Var, kind: Reduce, index: ReduceIndex },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Shuffle(Var),
    Unshuffle(Var),
    Concat(Var, Var),
    Narrow { x: Var, start: usize },
    InstanceNorm { x: Var, inv_std: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: &'static str,
}

/// Recorded computation over tensors of element type `T`.
pub struct Graph<T: Scalar = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok(())
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.index]
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, name });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, name: "leaf" });
        Ok(Var { graph: self.id, index: self.nodes.len() - 1 })
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last backward root with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("add", self.shape(a), self.shape(b))?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), v)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("sub", self.shape(a), self.shape(b))?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), v)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("mul", self.shape(a), self.shape(b))?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), v)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        same_shape("div", self.shape(a), self.shape(b))?;
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero("div"));
        }
        let v = zip_with(self.value(a), self.value(b), |x, y| x / y);
        let t = Tensor::new(self.shape(a).to_vec(), v)?;
        self.push("div", t, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let s = T::of(s);
        let t = self.value(a).map(|x| x + s);
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let s = T::of(s);
        let t = self.value(a).map(|x| x * s);
        self.push("mul_scalar", t, Op::MulScalar(a, s), &[a])
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(Error::DivisionByZero("div_scalar"));
        }
        self.mul_scalar(a, 1.0 / s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        self.check(a)?;
        let p = T::of(p);
        let t = self.value(a).map(|x| x.powf(p));
        self.push("pow", t, Op::PowScalar(a, p), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn log10(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).map(|x| x.log10());
        self.push("log10", t, Op::Log10(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).map(|x| x.ln());
        self.push("ln", t, Op::Ln(a), &[a])
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.check(a)?;
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp range [{lo}, {hi}] is empty")));
        }
        let (lo, hi) = (T::of(lo), T::of(hi));
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        self.push("clamp", t, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.check(a)?;
        let s = T::of(slope);
        let t = self.value(a).map(|x| if x >= T::zero() { x } else { x * s });
        self.push("leaky_relu", t, Op::LeakyRelu(a, s), &[a])
    }

    /// Directional derivative of `leaky_relu` at `x` along tangent `dx`.
    ///
    /// The activation's derivative is piecewise constant, so no gradient
    /// flows back into `x`.
    pub fn leaky_relu_tangent(&mut self, x: Var, dx: Var, slope: f64) -> Result<Var> {
        self.check(x)?;
        self.check(dx)?;
        same_shape("leaky_relu_tangent", self.shape(x), self.shape(dx))?;
        let s = T::of(slope);
        let v = zip_with(self.value(x), self.value(dx), |xv, d| if xv >= T::zero() { d } else { d * s });
        let t = Tensor::new(self.shape(x).to_vec(), v)?;
        self.push("leaky_relu_tangent", t, Op::LeakyReluTangent { x, dx, slope: s }, &[dx])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    // ---- broadcasting ------------------------------------------------

    fn bcast_inner(&self, op: &'static str, x: Var, y: Var) -> Result<usize> {
        self.check(x)?;
        self.check(y)?;
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[..ys.len()] != *ys {
            return Err(Error::ShapeMismatch { op, lhs: xs.to_vec(), rhs: ys.to_vec() });
        }
        Ok(numel(&xs[ys.len()..]))
    }

    /// `x + y` where `y`'s shape is a leading prefix of `x`'s shape.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.bcast_inner("add_bcast", x, y)?;
        let yv = self.value(y).data();
        let v: Vec<T> = self.value(x).data().iter().enumerate().map(|(i, &a)| a + yv[i / inner]).collect();
        let t = Tensor::new(self.shape(x).to_vec(), v)?;
        self.push("add_bcast", t, Op::AddBcast(x, y), &[x, y])
    }

    /// `x * y` where `y`'s shape is a leading prefix of `x`'s shape.
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.bcast_inner("mul_bcast", x, y)?;
        let yv = self.value(y).data();
        let v: Vec<T> = self.value(x).data().iter().enumerate().map(|(i, &a)| a * yv[i / inner]).collect();
        let t = Tensor::new(self.shape(x).to_vec(), v)?;
        self.push("mul_bcast", t, Op::MulBcast(x, y), &[x, y])
    }

    /// Repeats `y` along a new leading axis of length `n`.
    pub fn tile(&mut self, y: Var, n: usize) -> Result<Var> {
        self.check(y)?;
        if n == 0 {
            return Err(Error::InvalidArgument("tile count must be positive".into()));
        }
        let src = self.value(y);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let data: Vec<T> = (0..n).flat_map(|_| src.data().iter().copied()).collect();
        let t = Tensor::new(shape, data)?;
        self.push("tile", t, Op::Tile(y), &[y])
    }

    // ---- reductions and shape ----------------------------------------

    /// Reduces over `axes` (dropped from the result). An empty axis list is
    /// the identity for `Mean` and `Sum`.
    pub fn reduce(&mut self, kind: Reduce, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let rank = self.shape(x).len();
        if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        let index = ReduceIndex::new(self.shape(x), axes);
        let mut out = vec![T::zero(); index.out_len()];
        let src = self.value(x).data();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for (i, &v) in src.iter().enumerate() {
                    out[index.target(i)] = out[index.target(i)] + v;
                }
                if kind == Reduce::Mean {
                    let count = T::of((src.len() / out.len()) as f64);
                    out.iter_mut().for_each(|v| *v = *v / count);
                }
            }
            Reduce::L2Norm => {
                for (i, &v) in src.iter().enumerate() {
                    out[index.target(i)] = out[index.target(i)] + v * v;
                }
                out.iter_mut().for_each(|v| *v = v.sqrt());
            }
        }
        let t = Tensor::new(index.out_shape.clone(), out)?;
        self.push("reduce", t, Op::Reduce { x, kind, index }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(Reduce::Sum, x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(Reduce::Mean, x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    // ---- neural network primitives -----------------------------------

    /// Same-padded stride-1 cross-correlation; `w` is `(Cout, Cin, k, k)` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (n, cin, h, wd) = self.value(x).nchw()?;
        let (cout, wcin, k, k2) = self.value(w).nchw()?;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: self.shape(w).to_vec(),
                reason: "kernel must be square with odd size".into(),
            });
        }
        if let Some(b) = b {
            self.check(b)?;
            same_shape("conv2d bias", self.shape(b), &[cout])?;
        }
        let geom = ConvGeom { n, cin, cout, h, w: wd, k };
        let mut out = vec![T::zero(); n * cout * h * wd];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new([n, cout, h, wd], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Affine map of each row: `x (N, in)`, `w (out, in)`, `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch { op: "linear", lhs: xs.to_vec(), rhs: ws.to_vec() });
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        let beta = if let Some(b) = b {
            self.check(b)?;
            same_shape("linear bias", self.shape(b), &[dout])?;
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv);
            }
            T::one()
        } else {
            T::zero()
        };
        gemm(
            T::one(),
            MatRef::row_major(self.value(x).data(), n, din),
            MatRef::row_major(self.value(w).data(), dout, din).t(),
            beta,
            &mut out,
        );
        let t = Tensor::new([n, dout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", t, Op::Linear { x, w, b }, &inputs)
    }

    /// Space-to-depth by a factor of two per side.
    pub fn shuffle(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, c, h, w) = self.value(x).nchw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "shuffle",
                shape: self.shape(x).to_vec(),
                reason: "height and width must be even".into(),
            });
        }
        let mut out = vec![T::zero(); n * c * h * w];
        kernels::shuffle(self.value(x).data(), n, c, h, w, &mut out);
        let t = Tensor::new([n, 4 * c, h / 2, w / 2], out)?;
        self.push("shuffle", t, Op::Shuffle(x), &[x])
    }

    /// Depth-to-space, the exact inverse of [`Graph::shuffle`].
    pub fn unshuffle(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, c, h, w) = self.value(x).nchw()?;
        if c % 4 != 0 {
            return Err(Error::InvalidShape {
                op: "unshuffle",
                shape: self.shape(x).to_vec(),
                reason: "channel count must be divisible by 4".into(),
            });
        }
        let mut out = vec![T::zero(); n * c * h * w];
        kernels::unshuffle(self.value(x).data(), n, c, h, w, &mut out);
        let t = Tensor::new([n, c / 4, 2 * h, 2 * w], out)?;
        self.push("unshuffle", t, Op::Unshuffle(x), &[x])
    }

    /// Concatenates two `NCHW` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (n, ca, h, w) = self.value(a).nchw()?;
        let (nb, cb, hb, wb) = self.value(b).nchw()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[i * pb..(i + 1) * pb]);
        }
        let t = Tensor::new([n, ca + cb, h, w], out)?;
        self.push("concat", t, Op::Concat(a, b), &[a, b])
    }

    /// Slice `[start, start + len)` of axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || start + len > shape[1] || len == 0 {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("cannot take [{start}, {}) of axis 1", start + len),
            });
        }
        let inner = numel(&shape[2..]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(shape[0] * len * inner);
        for n in 0..shape[0] {
            let base = (n * shape[1] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[1] = len;
        let t = Tensor::new(oshape, out)?;
        self.push("narrow", t, Op::Narrow { x, start }, &[x])
    }

    /// Standardizes every `(sample, channel)` plane with population variance.
    pub fn instance_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let (n, c, h, w) = self.value(x).nchw()?;
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("instance norm epsilon must be positive".into()));
        }
        let mut out = vec![T::zero(); n * c * h * w];
        let inv_std = kernels::instance_normalize(self.value(x).data(), h * w, T::of(eps), &mut out);
        let t = Tensor::new([n, c, h, w], out)?;
        self.push("instance_norm", t, Op::InstanceNorm { x, inv_std }, &[x])
    }

    // ---- backward ----------------------------------------------------

    /// Propagates gradients from the scalar `root` to every leaf that
    /// requires them. Gradients of leaves used several times accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        if self.backward_done {
            return Err(Error::BackwardReentry);
        }
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[r] = Some(Tensor::ones(self.shape(root).to_vec()));
        for i in (0..=r).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", self.nodes[i].name)));
            }
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        if grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("leaf gradient".into()));
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.index] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.nodes[v.index].value.shape().to_vec(), g)
                        .expect("gradient matches value shape"),
                );
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| self.nodes[v.index].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.wants(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g / y).collect());
                }
                if self.wants(*b) {
                    let out = node.value.data();
                    let gb = gd.iter().zip(out).zip(bv).map(|((&g, &o), &y)| -g * o / y).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::MulScalar(a, s) => self.accumulate(grads, *a, gd.iter().map(|&g| g * *s).collect()),
            Op::PowScalar(a, p) => {
                let one = T::one();
                let ga = gd.iter().zip(val(*a)).map(|(&g, &x)| g * *p * x.powf(*p - one)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Log10(a) => {
                let ln10 = T::of(std::f64::consts::LN_10);
                self.accumulate(grads, *a, gd.iter().zip(val(*a)).map(|(&g, &x)| g / (x * ln10)).collect());
            }
            Op::Ln(a) => {
                self.accumulate(grads, *a, gd.iter().zip(val(*a)).map(|(&g, &x)| g / x).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let ga = gd
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > *lo && x < *hi { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, s) => {
                let ga = gd
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x >= T::zero() { g } else { g * *s })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyReluTangent { x, dx, slope } => {
                let gdx = gd
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &xv)| if xv >= T::zero() { g } else { g * *slope })
                    .collect();
                self.accumulate(grads, *dx, gdx);
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                let ga = gd.iter().zip(out).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::AddBcast(x, y) => {
                self.accumulate(grads, *x, gd.to_vec());
                if self.wants(*y) {
                    let ylen = self.nodes[y.index].value.len();
                    let inner = gd.len() / ylen;
                    let gy = gd.chunks_exact(inner).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *y, gy);
                }
            }
            Op::MulBcast(x, y) => {
                let yv = val(*y);
                let inner = gd.len() / yv.len();
                if self.wants(*x) {
                    let gx = gd.iter().enumerate().map(|(i, &g)| g * yv[i / inner]).collect();
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*y) {
                    let gy = gd
                        .chunks_exact(inner)
                        .zip(val(*x).chunks_exact(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *y, gy);
                }
            }
            Op::Tile(y) => {
                let ylen = self.nodes[y.index].value.len();
                let mut gy = vec![T::zero(); ylen];
                for chunk in gd.chunks_exact(ylen) {
                    for (a, &b) in gy.iter_mut().zip(chunk) {
                        *a = *a + b;
                    }
                }
                self.accumulate(grads, *y, gy);
            }
            Op::Reduce { x, kind, index } => {
                let xv = val(*x);
                let gx = match kind {
                    Reduce::Sum => (0..xv.len()).map(|j| gd[index.target(j)]).collect(),
                    Reduce::Mean => {
                        let count = T::of((xv.len() / gd.len()) as f64);
                        (0..xv.len()).map(|j| gd[index.target(j)] / count).collect()
                    }
                    Reduce::L2Norm => {
                        let norms = node.value.data();
                        (0..xv.len())
                            .map(|j| {
                                let t = index.target(j);
                                if norms[t].is_zero() {
                                    T::zero()
                                } else {
                                    gd[t] * xv[j] / norms[t]
                                }
                            })
                            .collect()
                    }
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Conv2d { x, w, b, geom } => {
                let mut gx = self.wants(*x).then(|| vec![T::zero(); val(*x).len()]);
                let mut gw = self.wants(*w).then(|| vec![T::zero(); val(*w).len()]);
                let mut gb = b.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); geom.cout]);
                kernels::conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    gd,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                let gmat = MatRef::row_major(gd, n, dout);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); n * din];
                    gemm(T::one(), gmat, MatRef::row_major(val(*w), dout, din), T::zero(), &mut gx);
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); dout * din];
                    gemm(T::one(), gmat.t(), MatRef::row_major(val(*x), n, din), T::zero(), &mut gw);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut gb = vec![T::zero(); dout];
                    for row in gd.chunks_exact(dout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Shuffle(x) => {
                let (n, c, h, w) = self.nodes[x.index].value.nchw()?;
                let mut gx = vec![T::zero(); gd.len()];
                kernels::unshuffle(gd, n, 4 * c, h / 2, w / 2, &mut gx);
                self.accumulate(grads, *x, gx);
            }
            Op::Unshuffle(x) => {
                let (n, c, h, w) = self.nodes[x.index].value.nchw()?;
                let mut gx = vec![T::zero(); gd.len()];
                kernels::shuffle(gd, n, c / 4, 2 * h, 2 * w, &mut gx);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.nodes[a.index].value.nchw()?;
                let cb = self.nodes[b.index].value.nchw()?.1;
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * pa);
                let mut gb = Vec::with_capacity(n * pb);
                for chunk in gd.chunks_exact(pa + pb) {
                    ga.extend_from_slice(&chunk[..pa]);
                    gb.extend_from_slice(&chunk[pa..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Narrow { x, start } => {
                let xs = self.shape(*x);
                let inner = numel(&xs[2..]);
                let len = node.value.shape()[1];
                let mut gx = vec![T::zero(); val(*x).len()];
                for n in 0..xs[0] {
                    let dst = (n * xs[1] + start) * inner;
                    let src = n * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = node.value.nchw()?;
                let mut gx = vec![T::zero(); gd.len()];
                kernels::instance_normalize_backward(node.value.data(), inv_std, gd, h * w, &mut gx);
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}
