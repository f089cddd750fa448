//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it in reverse. Every op checks its
//! output for NaN/Inf and fails instead of propagating them.

use super::kernels::{self, ConvGeometry, Conv3dDims};
use super::tensor::{broadcast_map, Scalar, Tensor};
use super::NumericsError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `a + b`, `b` broadcast into `a` through `map`.
    Add(Var, Var, Vec<usize>),
    Sub(Var, Var, Vec<usize>),
    Mul(Var, Var, Vec<usize>),
    Scale(Var, T),
    AddScalar(Var),
    Pow(Var, T),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    /// Keep-dim sum; `map` sends each input index to its output slot.
    Sum(Var, Vec<usize>),
    /// Keep-dim max; `arg[j]` is the input index selected for output `j`.
    Max(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    MatMul(Var, Var),
    Conv3d(Var, Var, ConvGeometry),
    AvgPoolAxis(Var, usize, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use computation graph.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var, NumericsError> {
        let value = value.check_finite(name)?;
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv3d(x, w, _) => vec![*x, *w],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Pow(a, _)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a, _)
            | Op::Sum(a, _)
            | Op::Max(a, _)
            | Op::Reshape(a)
            | Op::AvgPoolAxis(a, _, _) => vec![*a],
            Op::Concat(vs, _) => vs.clone(),
        }
    }

    fn bcast(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>, NumericsError> {
        broadcast_map(self.shape(a), self.shape(b)).ok_or_else(|| NumericsError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var, Vec<usize>) -> Op<T>,
    ) -> Result<Var, NumericsError> {
        let map = self.bcast(a, b, name)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = av.data().iter().zip(&map).map(|(&x, &j)| f(x, bv[j])).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, op(a, b, map), name)
    }

    /// `a + b` with `b` broadcast into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with `b` broadcast into the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn pow(&mut self, a: Var, p: T) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::Pow(a, p), "pow")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let v = self.value(a);
        check_axis(v.shape(), axis, "softmax")?;
        let data = kernels::softmax(v.data(), v.shape(), axis);
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(out, Op::Softmax(a, axis), "softmax")
    }

    fn reduced_shape(&self, a: Var, axes: &[usize], op: &'static str) -> Result<Vec<usize>, NumericsError> {
        let mut shape = self.shape(a).to_vec();
        for &ax in axes {
            check_axis(&shape, ax, op)?;
            shape[ax] = 1;
        }
        Ok(shape)
    }

    /// Sum over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.reduced_shape(a, axes, "sum_axes")?;
        let map = broadcast_map(self.shape(a), &shape).expect("reduced shape broadcasts");
        let mut data = vec![T::zero(); shape.iter().product()];
        for (&x, &j) in self.value(a).data().iter().zip(&map) {
            data[j] = data[j] + x;
        }
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::Sum(a, map), "sum_axes")
    }

    /// Mean over `axes`, keeping them as extent-1 dimensions.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(a);
        let count: usize = axes.iter().map(|&ax| shape.get(ax).copied().unwrap_or(1)).product();
        let s = self.sum_axes(a, axes)?;
        self.scale(s, T::one() / T::of(count as f64))
    }

    /// Max over `axes`, keeping them as extent-1 dimensions. Ties route the
    /// gradient to the first maximal element.
    pub fn max_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.reduced_shape(a, axes, "max_axes")?;
        let map = broadcast_map(self.shape(a), &shape).expect("reduced shape broadcasts");
        let n_out: usize = shape.iter().product();
        let mut data = vec![T::neg_infinity(); n_out];
        let mut arg = vec![usize::MAX; n_out];
        for (i, (&x, &j)) in self.value(a).data().iter().zip(&map).enumerate() {
            if arg[j] == usize::MAX || x > data[j] {
                data[j] = x;
                arg[j] = i;
            }
        }
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::Max(a, arg), "max_axes")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, vs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = vs.first().ok_or_else(|| NumericsError::InvalidArgument("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &v in vs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in vs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::Concat(vs.to_vec(), axis), "concat")
    }

    /// `a: m×k` times `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::from_parts(vec![m, n], data);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Cross-correlation of `x: N×C×T×H×W` with `w: O×C×kt×kh×kw`.
    pub fn conv3d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var, NumericsError> {
        let d = Conv3dDims::infer(self.shape(x), self.shape(w), geom)?;
        let data = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), &d);
        let out = Tensor::from_parts(d.out_shape(), data);
        self.push(out, Op::Conv3d(x, w, geom), "conv3d")
    }

    /// Stride-1 moving average along `axis` with a centred window of odd
    /// length; positions near the border average over the in-range entries only.
    pub fn avg_pool_axis(&mut self, a: Var, axis: usize, window: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "avg_pool_axis")?;
        if window == 0 || window % 2 == 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "pooling window must be odd and positive, got {window}"
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.value(a).data();
        let mut data = vec![T::zero(); x.len()];
        let half = window / 2;
        for o in 0..outer {
            for i in 0..inner {
                for t in 0..len {
                    let lo = t.saturating_sub(half);
                    let hi = (t + half + 1).min(len);
                    let mut acc = T::zero();
                    for s in lo..hi {
                        acc = acc + x[(o * len + s) * inner + i];
                    }
                    data[(o * len + t) * inner + i] = acc / T::of((hi - lo) as f64);
                }
            }
        }
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::AvgPoolAxis(a, axis, window), "avg_pool_axis")
    }

    /// Reverse-mode gradients of the single-element node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.needs_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), NumericsError> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, map) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || self.reduce_into(*b, g, map));
            }
            Op::Sub(a, b, map) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || {
                    self.reduce_into(*b, g, map).into_iter().map(|v| -v).collect()
                });
            }
            Op::Mul(a, b, map) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, || g.iter().zip(map).map(|(&gi, &j)| gi * bv[j]).collect());
                self.acc(grads, *b, || {
                    let mut out = vec![T::zero(); bv.len()];
                    for ((&gi, &j), &x) in g.iter().zip(map).zip(av) {
                        out[j] = out[j] + gi * x;
                    }
                    out
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, || g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, || g.to_vec()),
            Op::Pow(a, p) => {
                let x = self.value(*a).data();
                let pm1 = *p - T::one();
                self.acc(grads, *a, || {
                    g.iter().zip(x).map(|(&gi, &xi)| gi * *p * xi.powf(pm1)).collect()
                });
            }
            Op::Exp(a) => self.acc(grads, *a, || g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, || {
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect()
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, || {
                    g.iter().zip(x).map(|(&gi, &xi)| gi * kernels::gelu_grad(xi)).collect()
                });
            }
            Op::Sigmoid(a) => self.acc(grads, *a, || {
                g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect()
            }),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                self.acc(grads, *a, || {
                    let mut out = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..len).fold(T::zero(), |s, j| s + g[at(j)] * y[at(j)]);
                            for j in 0..len {
                                out[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    out
                });
            }
            Op::Sum(a, map) => self.acc(grads, *a, || map.iter().map(|&j| g[j]).collect()),
            Op::Max(a, arg) => self.acc(grads, *a, || {
                let mut out = vec![T::zero(); self.value(*a).numel()];
                for (&i, &gi) in arg.iter().zip(g) {
                    out[i] = out[i] + gi;
                }
                out
            }),
            Op::Concat(vs, axis) => {
                let (outer, _, inner) = kernels::axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut start = 0;
                for &v in vs {
                    let len = self.shape(v)[*axis] * inner;
                    self.acc(grads, v, || {
                        let mut out = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            out.extend_from_slice(&g[o * total + start..o * total + start + len]);
                        }
                        out
                    });
                    start += len;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, || kernels::matmul_a_bt(g, bv, m, k, n));
                self.acc(grads, *b, || kernels::matmul_at_b(av, g, m, k, n));
            }
            Op::Conv3d(x, w, geom) => {
                let d = Conv3dDims::infer(self.shape(*x), self.shape(*w), *geom)?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.acc(grads, *x, || kernels::conv3d_backward_input(g, wv, &d));
                self.acc(grads, *w, || kernels::conv3d_backward_weight(g, xv, &d));
            }
            Op::AvgPoolAxis(a, axis, window) => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let half = window / 2;
                self.acc(grads, *a, || {
                    let mut out = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            for t in 0..len {
                                let lo = t.saturating_sub(half);
                                let hi = (t + half + 1).min(len);
                                let share = g[(o * len + t) * inner + i] / T::of((hi - lo) as f64);
                                for s in lo..hi {
                                    let p = (o * len + s) * inner + i;
                                    out[p] = out[p] + share;
                                }
                            }
                        }
                    }
                    out
                });
            }
        }
        Ok(())
    }

    fn reduce_into(&self, b: Var, g: &[T], map: &[usize]) -> Vec<T> {
        let mut out = vec![T::zero(); self.value(b).numel()];
        for (&gi, &j) in g.iter().zip(map) {
            out[j] = out[j] + gi;
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce() -> Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let c = contrib();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(c) {
                    *e = *e + x;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(), NumericsError> {
    if axis >= shape.len() {
        Err(NumericsError::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )))
    } else {
        Ok(())
    }
}
