//! Eager reverse-mode autodiff on f64 tensors.
//!
//! Values live in an append-only graph; every operation computes its result
//! immediately and records how it was produced. The backward pass expresses
//! each adjoint with the same recorded operations, so gradients are
//! themselves differentiable: calling [`Graph::grads`] on a value produced by
//! an earlier `grads` call yields second-order derivatives. That is what the
//! discriminator gradient penalty needs.
//!
//! The op set is intentionally small and closed under differentiation:
//! elementwise arithmetic with numpy-style broadcasting, matmul, reshapes and
//! permutes, patch extraction (im2col/col2im), 2x up/down sampling, slicing,
//! row gather/scatter, and cumulative sums.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{concatenate, Axis, Slice};
use ndarray::{Array2, ArrayD, Ix2, Ix4, IxDyn};

use crate::kernels::{self, ConvSpec};

pub type Tensor = ArrayD<f64>;

/// Handle to a value in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    Im2col(Var, ConvSpec),
    Col2im(Var, ConvSpec),
    NearestUp2(Var),
    SumPool2(Var),
    Concat(Vec<Var>, usize),
    SliceAxis(Var, usize, usize),
    EmbedAxis(Var, usize, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterRows(Var, Arc<Vec<usize>>),
    CumsumAxis(Var, usize),
    FlipAxis(Var, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn reduce_to(x: &Tensor, target: &[usize]) -> Tensor {
    let mut y = x.clone();
    while y.ndim() > target.len() {
        y = y.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if y.shape()[ax] != target[ax] {
            debug_assert_eq!(target[ax], 1, "sum_to target must have dim 1 where shrinking");
            y = y.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    y
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn op(&self, v: Var) -> Op {
        self.nodes.borrow()[v.0].op.clone()
    }

    /// Shared handle to the value of `v`.
    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a 0-d (or single-element) var as a plain f64.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar");
        *val.iter().next().expect("non-empty")
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Leaf that participates in differentiation.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    /// Constant copy of an existing value (cuts the gradient path).
    pub fn detach(&self, v: Var) -> Var {
        self.constant((*self.value(v)).clone())
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let value = if va.shape() == vb.shape() {
            ndarray::Zip::from(&*va).and(&*vb).map_collect(|&x, &y| f(x, y))
        } else {
            let t = broadcast_shape(va.shape(), vb.shape());
            let ba = va.broadcast(IxDyn(&t)).expect("broadcast lhs");
            let bb = vb.broadcast(IxDyn(&t)).expect("broadcast rhs");
            ndarray::Zip::from(&ba).and(&bb).map_collect(|&x, &y| f(x, y))
        };
        self.push(value, op, self.needs(a) || self.needs(b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).mapv(f);
        self.push(value, op, self.needs(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn shift(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        debug_assert_eq!(a2.dim().1, b2.dim().0, "matmul inner dims");
        let value = kernels::matmul(a2, b2).into_dyn();
        self.push(value, Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn transpose2(&self, a: Var) -> Var {
        self.permute(a, &[1, 0])
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        self.push(value, Op::Permute(a, perm.to_vec()), self.needs(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        debug_assert_eq!(va.len(), shape.iter().product::<usize>(), "reshape size");
        let value = va
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.push(value, Op::Reshape(a), self.needs(a))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        if va.shape() == shape {
            return a;
        }
        let value = va.broadcast(IxDyn(shape)).expect("broadcast_to").to_owned();
        self.push(value, Op::BroadcastTo(a), self.needs(a))
    }

    /// Sum-reduce to a (broadcast-compatible) smaller shape.
    pub fn sum_to(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        if va.shape() == shape {
            return a;
        }
        let value = reduce_to(&va, shape);
        self.push(value, Op::SumTo(a), self.needs(a))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.sum_to(a, &[])
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Keep-dim sum along one axis.
    pub fn sum_axis_keep(&self, a: Var, axis: usize) -> Var {
        let mut target = self.shape(a);
        target[axis] = 1;
        self.sum_to(a, &target)
    }

    pub fn im2col(&self, a: Var, spec: ConvSpec) -> Var {
        let va = self.value(a);
        let x = va.view().into_dimensionality::<Ix4>().expect("im2col 4-d");
        let value = kernels::im2col(x, spec).into_dyn();
        self.push(value, Op::Im2col(a, spec), self.needs(a))
    }

    pub fn col2im(&self, a: Var, spec: ConvSpec, shape: [usize; 4]) -> Var {
        let va = self.value(a);
        let x = va.view().into_dimensionality::<Ix2>().expect("col2im 2-d");
        let value = kernels::col2im(x, spec, shape).into_dyn();
        self.push(value, Op::Col2im(a, spec), self.needs(a))
    }

    pub fn nearest_up2(&self, a: Var) -> Var {
        let va = self.value(a);
        let x = va.view().into_dimensionality::<Ix4>().expect("up2 4-d");
        let value = kernels::nearest_up2(x).into_dyn();
        self.push(value, Op::NearestUp2(a), self.needs(a))
    }

    pub fn sum_pool2(&self, a: Var) -> Var {
        let va = self.value(a);
        let x = va.view().into_dimensionality::<Ix4>().expect("pool 4-d");
        let value = kernels::sum_pool2(x).into_dyn();
        self.push(value, Op::SumPool2(a), self.needs(a))
    }

    pub fn avg_pool2(&self, a: Var) -> Var {
        let s = self.sum_pool2(a);
        self.scale(s, 0.25)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|v| self.value(*v)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat");
        let needs = parts.iter().any(|v| self.needs(*v));
        self.push(value, Op::Concat(parts.to_vec(), axis), needs)
    }

    pub fn slice_axis(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let value = va
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(value, Op::SliceAxis(a, axis, start), self.needs(a))
    }

    /// Embed into a zero tensor whose `axis` has length `full_len`, at offset
    /// `start`. Adjoint of [`Graph::slice_axis`].
    pub fn embed_axis(&self, a: Var, axis: usize, start: usize, full_len: usize) -> Var {
        let va = self.value(a);
        let mut shape = va.shape().to_vec();
        let len = shape[axis];
        shape[axis] = full_len;
        let mut value = Tensor::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(&va);
        self.push(value, Op::EmbedAxis(a, axis, start), self.needs(a))
    }

    /// Row lookup on a 2-D tensor; indices may repeat.
    pub fn gather_rows(&self, a: Var, indices: Arc<Vec<usize>>) -> Var {
        let va = self.value(a);
        let m = va.view().into_dimensionality::<Ix2>().expect("gather 2-d");
        let cols = m.dim().1;
        let mut out = Array2::zeros((indices.len(), cols));
        for (i, &r) in indices.iter().enumerate() {
            out.row_mut(i).assign(&m.row(r));
        }
        self.push(out.into_dyn(), Op::GatherRows(a, indices), self.needs(a))
    }

    /// Scatter-add rows of a 2-D tensor into `n_rows` rows. Adjoint of
    /// [`Graph::gather_rows`].
    pub fn scatter_rows(&self, a: Var, indices: Arc<Vec<usize>>, n_rows: usize) -> Var {
        let va = self.value(a);
        let m = va.view().into_dimensionality::<Ix2>().expect("scatter 2-d");
        debug_assert_eq!(m.dim().0, indices.len());
        let cols = m.dim().1;
        let mut out = Array2::zeros((n_rows, cols));
        for (i, &r) in indices.iter().enumerate() {
            let mut row = out.row_mut(r);
            row += &m.row(i);
        }
        self.push(out.into_dyn(), Op::ScatterRows(a, indices), self.needs(a))
    }

    /// Inclusive cumulative sum along `axis`.
    pub fn cumsum_axis(&self, a: Var, axis: usize) -> Var {
        let mut value = (*self.value(a)).clone();
        value.accumulate_axis_inplace(Axis(axis), |&prev, cur| *cur += prev);
        self.push(value, Op::CumsumAxis(a, axis), self.needs(a))
    }

    pub fn flip_axis(&self, a: Var, axis: usize) -> Var {
        let mut value = (*self.value(a)).clone();
        value.invert_axis(Axis(axis));
        self.push(value, Op::FlipAxis(a, axis), self.needs(a))
    }

    fn ones_like(&self, v: Var) -> Var {
        let shape = self.shape(v);
        self.constant(Tensor::ones(IxDyn(&shape)))
    }

    /// Adjoint contributions of node `v` given its output adjoint `g`.
    fn vjp(&self, v: Var, g: Var, out: &mut Vec<(Var, Var)>) {
        match self.op(v) {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(a) {
                    out.push((a, self.sum_to(g, &self.shape(a))));
                }
                if self.needs(b) {
                    out.push((b, self.sum_to(g, &self.shape(b))));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    out.push((a, self.sum_to(g, &self.shape(a))));
                }
                if self.needs(b) {
                    let n = self.neg(g);
                    out.push((b, self.sum_to(n, &self.shape(b))));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let p = self.mul(g, b);
                    out.push((a, self.sum_to(p, &self.shape(a))));
                }
                if self.needs(b) {
                    let p = self.mul(g, a);
                    out.push((b, self.sum_to(p, &self.shape(b))));
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    let p = self.div(g, b);
                    out.push((a, self.sum_to(p, &self.shape(a))));
                }
                if self.needs(b) {
                    // d(a/b)/db = -a / b^2 = -out / b
                    let q = self.div(v, b);
                    let p = self.mul(g, q);
                    let n = self.neg(p);
                    out.push((b, self.sum_to(n, &self.shape(b))));
                }
            }
            Op::Neg(a) => out.push((a, self.neg(g))),
            Op::Scale(a, c) => out.push((a, self.scale(g, c))),
            Op::Shift(a) => out.push((a, g)),
            Op::Exp(a) => out.push((a, self.mul(g, v))),
            Op::Ln(a) => out.push((a, self.div(g, a))),
            Op::Sqrt(a) => {
                let d = self.div(g, v);
                out.push((a, self.scale(d, 0.5)));
            }
            Op::Abs(a) => {
                let sign = self.constant(self.value(a).mapv(|x| if x >= 0.0 { 1.0 } else { -1.0 }));
                out.push((a, self.mul(g, sign)));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                out.push((a, self.mul(g, s)));
            }
            Op::Sigmoid(a) => {
                let one_minus = self.shift(self.neg(v), 1.0);
                let d = self.mul(v, one_minus);
                out.push((a, self.mul(g, d)));
            }
            Op::Tanh(a) => {
                let sq = self.mul(v, v);
                let d = self.shift(self.neg(sq), 1.0);
                out.push((a, self.mul(g, d)));
            }
            Op::LeakyRelu(a, slope) => {
                let mask =
                    self.constant(self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { slope }));
                out.push((a, self.mul(g, mask)));
            }
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let bt = self.transpose2(b);
                    out.push((a, self.matmul(g, bt)));
                }
                if self.needs(b) {
                    let at = self.transpose2(a);
                    out.push((b, self.matmul(at, g)));
                }
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                out.push((a, self.permute(g, &inverse)));
            }
            Op::Reshape(a) => out.push((a, self.reshape(g, &self.shape(a)))),
            Op::BroadcastTo(a) => out.push((a, self.sum_to(g, &self.shape(a)))),
            Op::SumTo(a) => out.push((a, self.broadcast_to(g, &self.shape(a)))),
            Op::Im2col(a, spec) => {
                let s = self.shape(a);
                out.push((a, self.col2im(g, spec, [s[0], s[1], s[2], s[3]])));
            }
            Op::Col2im(a, spec) => out.push((a, self.im2col(g, spec))),
            Op::NearestUp2(a) => out.push((a, self.sum_pool2(g))),
            Op::SumPool2(a) => out.push((a, self.nearest_up2(g))),
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(p)[axis];
                    if self.needs(p) {
                        out.push((p, self.slice_axis(g, axis, start, len)));
                    }
                    start += len;
                }
            }
            Op::SliceAxis(a, axis, start) => {
                let full = self.shape(a)[axis];
                out.push((a, self.embed_axis(g, axis, start, full)));
            }
            Op::EmbedAxis(a, axis, start) => {
                let len = self.shape(a)[axis];
                out.push((a, self.slice_axis(g, axis, start, len)));
            }
            Op::GatherRows(a, indices) => {
                let n_rows = self.shape(a)[0];
                out.push((a, self.scatter_rows(g, indices, n_rows)));
            }
            Op::ScatterRows(a, indices) => out.push((a, self.gather_rows(g, indices))),
            Op::CumsumAxis(a, axis) => {
                let f = self.flip_axis(g, axis);
                let c = self.cumsum_axis(f, axis);
                out.push((a, self.flip_axis(c, axis)));
            }
            Op::FlipAxis(a, axis) => out.push((a, self.flip_axis(g, axis))),
        }
    }

    /// Reverse-mode gradients of `root` with respect to `wrt`.
    ///
    /// Adjoints are ordinary graph values, so the returned vars can be used
    /// in further computation (including another `grads` call). `None` means
    /// the var does not influence `root`.
    pub fn grads(&self, root: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        if !self.needs(root) {
            return vec![None; wrt.len()];
        }
        let mut adjoint: Vec<Option<Var>> = vec![None; root.0 + 1];
        adjoint[root.0] = Some(self.ones_like(root));
        let mut contributions = Vec::with_capacity(4);
        for id in (0..=root.0).rev() {
            let Some(g) = adjoint[id] else { continue };
            if !self.needs(Var(id)) {
                continue;
            }
            contributions.clear();
            self.vjp(Var(id), g, &mut contributions);
            for &(input, contribution) in &contributions {
                if self.needs(input) {
                    let slot = &mut adjoint[input.0];
                    let merged = match slot.take() {
                        Some(existing) => self.add(existing, contribution),
                        None => contribution,
                    };
                    *slot = Some(merged);
                }
            }
        }
        wrt.iter()
            .map(|v| if v.0 <= root.0 { adjoint[v.0] } else { None })
            .collect()
    }

    /// Gradient values (zeros where `root` does not depend on the var).
    pub fn grad_values(&self, root: Var, wrt: &[Var]) -> Vec<Tensor> {
        self.grads(root, wrt)
            .iter()
            .zip(wrt)
            .map(|(g, v)| match g {
                Some(g) => (*self.value(*g)).clone(),
                None => Tensor::zeros(IxDyn(&self.shape(*v))),
            })
            .collect()
    }
}

/// Finite-difference oracle used by gradient tests. Only evaluates the
/// forward computation, so it stays independent of the backward pass.
pub mod check {
    use super::Tensor;

    /// Central-difference gradient of a scalar function of one tensor input.
    pub fn central_diff_grad(
        f: &mut dyn FnMut(&Tensor) -> f64,
        at: &Tensor,
        eps: f64,
    ) -> Tensor {
        let mut grad = Tensor::zeros(at.raw_dim());
        let mut x = at.clone();
        for i in 0..at.len() {
            let orig = x.as_slice_mut().expect("standard layout")[i];
            x.as_slice_mut().expect("layout")[i] = orig + eps;
            let hi = f(&x);
            x.as_slice_mut().expect("layout")[i] = orig - eps;
            let lo = f(&x);
            x.as_slice_mut().expect("layout")[i] = orig;
            grad.as_slice_mut().expect("layout")[i] = (hi - lo) / (2.0 * eps);
        }
        grad
    }

    /// Largest relative error between analytic and numeric gradients,
    /// with a small absolute floor to avoid 0/0.
    pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::check::{central_diff_grad, max_rel_err};
    use super::*;
    use ndarray::{arr1, arr2, Array};

    fn scalar_fn_grad_matches(
        build: impl Fn(&Graph, Var) -> Var,
        at: Tensor,
        tol: f64,
    ) {
        let g = Graph::new();
        let x = g.param(at.clone());
        let y = build(&g, x);
        assert_eq!(g.shape(y), Vec::<usize>::new(), "expected scalar output");
        let grad = g.grad_values(y, &[x]).pop().unwrap();
        let mut f = |v: &Tensor| {
            let g2 = Graph::new();
            let x2 = g2.param(v.clone());
            g2.scalar_value(build(&g2, x2))
        };
        let numeric = central_diff_grad(&mut f, &at, 1e-5);
        let err = max_rel_err(&grad, &numeric);
        assert!(err < tol, "rel err {err} exceeds {tol}");
    }

    #[test]
    fn elementwise_chain_gradient() {
        let at = arr1(&[0.3, -1.2, 2.0, 0.01]).into_dyn();
        scalar_fn_grad_matches(
            |g, x| {
                let a = g.tanh(x);
                let b = g.softplus(a);
                let c = g.mul(b, x);
                let d = g.sigmoid(c);
                g.sum_all(d)
            },
            at,
            1e-7,
        );
    }

    #[test]
    fn matmul_and_reductions_gradient() {
        let at = arr2(&[[0.5, -0.3], [1.1, 0.2], [-0.7, 0.9]]).into_dyn();
        scalar_fn_grad_matches(
            |g, x| {
                let w = g.constant(arr2(&[[0.2, -0.4, 0.6], [1.0, 0.5, -0.1]]).into_dyn());
                let y = g.matmul(x, w);
                let s = g.square(y);
                g.mean_all(s)
            },
            at,
            1e-7,
        );
    }

    #[test]
    fn broadcast_gradient() {
        let at = arr1(&[0.5, -0.25]).into_dyn();
        scalar_fn_grad_matches(
            |g, x| {
                let big = g.constant(Array::from_shape_fn((3, 2), |(i, j)| (i + j) as f64).into_dyn());
                let r = g.reshape(x, &[1, 2]);
                let b = g.broadcast_to(r, &[3, 2]);
                let p = g.mul(big, b);
                let e = g.exp(p);
                g.sum_all(e)
            },
            at,
            1e-7,
        );
    }

    #[test]
    fn conv_building_blocks_gradient() {
        let at = Array::from_shape_fn((1, 2, 4, 4), |(_, c, y, x)| {
            0.1 * (c as f64) - 0.2 * (y as f64) + 0.3 * (x as f64)
        })
        .into_dyn();
        let spec = ConvSpec { kernel: 3, stride: 1, pad: 1 };
        scalar_fn_grad_matches(
            |g, x| {
                let cols = g.im2col(x, spec);
                let w = g.constant(
                    Array::from_shape_fn((18, 3), |(i, j)| ((i + j) % 5) as f64 * 0.1 - 0.2)
                        .into_dyn(),
                );
                let y = g.matmul(cols, w);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            at,
            1e-7,
        );
    }

    #[test]
    fn cumsum_slice_gather_gradient() {
        let at = Array::from_shape_fn((4, 3), |(i, j)| 0.3 * i as f64 - 0.1 * j as f64).into_dyn();
        let idx = Arc::new(vec![2usize, 0, 2]);
        scalar_fn_grad_matches(
            move |g, x| {
                let c = g.cumsum_axis(x, 0);
                let s = g.slice_axis(c, 0, 1, 3);
                let picked = g.gather_rows(s, idx.clone());
                let sq = g.square(picked);
                g.sum_all(sq)
            },
            at,
            1e-7,
        );
    }

    #[test]
    fn second_order_gradient_matches_analytic() {
        // y = sum(x^3); dy/dx = 3x^2; d(sum(dy/dx))/dx = 6x.
        let g = Graph::new();
        let at = arr1(&[0.7, -1.3, 2.1]).into_dyn();
        let x = g.param(at.clone());
        let x2 = g.mul(x, x);
        let x3 = g.mul(x2, x);
        let y = g.sum_all(x3);
        let first = g.grads(y, &[x])[0].expect("first grad");
        let first_sum = g.sum_all(first);
        let second = g.grad_values(first_sum, &[x]).pop().unwrap();
        for (s, v) in second.iter().zip(at.iter()) {
            assert!((s - 6.0 * v).abs() < 1e-9, "{s} vs {}", 6.0 * v);
        }
    }

    #[test]
    fn grad_penalty_second_order_through_matmul() {
        // f(x) = w2 . tanh(W1 x). penalty = ||df/dx||^2 depends on W1; check
        // d penalty / d W1 against finite differences.
        let w1_at = arr2(&[[0.4, -0.2], [0.3, 0.8], [-0.5, 0.1]]).into_dyn();
        let x_at = arr1(&[0.9, -0.4]).into_dyn();

        let penalty = |w1: &Tensor| -> (f64, Option<Tensor>) {
            let g = Graph::new();
            let w1v = g.param(w1.clone());
            let x = g.param(x_at.clone());
            let xc = g.reshape(x, &[2, 1]);
            let h = g.matmul(w1v, xc);
            let t = g.tanh(h);
            let w2 = g.constant(arr2(&[[0.7, -1.1, 0.2]]).into_dyn());
            let y = g.matmul(w2, t);
            let ys = g.sum_all(y);
            let gx = g.grads(ys, &[x])[0].expect("input grad");
            let p = g.square(gx);
            let ps = g.sum_all(p);
            let grad_w1 = g.grad_values(ps, &[w1v]).pop().unwrap();
            (g.scalar_value(ps), Some(grad_w1))
        };

        let (_, analytic) = penalty(&w1_at);
        let analytic = analytic.unwrap();
        let mut f = |w: &Tensor| penalty(w).0;
        let numeric = central_diff_grad(&mut f, &w1_at, 1e-5);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "second-order rel err {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = g.param(arr1(&[1.0, 2.0]).into_dyn());
        let d = g.detach(x);
        let y = g.sum_all(g.mul(d, d));
        assert!(g.grads(y, &[x])[0].is_none());
    }

    #[test]
    fn scatter_gather_roundtrip_values() {
        let g = Graph::new();
        let x = g.param(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn());
        let idx = Arc::new(vec![1usize, 1, 0]);
        let picked = g.gather_rows(x, idx.clone());
        assert_eq!(
            *g.value(picked),
            arr2(&[[3.0, 4.0], [3.0, 4.0], [1.0, 2.0]]).into_dyn()
        );
        let spread = g.scatter_rows(picked, idx, 3);
        assert_eq!(
            *g.value(spread),
            arr2(&[[1.0, 2.0], [6.0, 8.0], [0.0, 0.0]]).into_dyn()
        );
    }
}
