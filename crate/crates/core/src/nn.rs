//! Network building blocks on top of the tape: parameters, layers, and Adam.
//!
//! Parameters are plain tensors owned by module structs. Each training step
//! lifts them into a fresh [`Graph`] through a [`Cx`] context; lifting is
//! cached per parameter so a module can run forward twice (e.g. the
//! discriminator on real and fake batches) while gradients accumulate into a
//! single var.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tape::{Graph, Tensor, Var};

pub const LRELU_SLOPE: f64 = 0.2;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A learnable tensor with a process-unique identity.
#[derive(Clone, Debug)]
pub struct Param {
    id: u64,
    pub value: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }
}

/// Lifting context tying module parameters to graph vars for one step.
pub struct Cx<'g> {
    pub g: &'g Graph,
    trainable: bool,
    lifted: RefCell<BTreeMap<u64, Var>>,
}

impl<'g> Cx<'g> {
    pub fn new(g: &'g Graph, trainable: bool) -> Self {
        Self {
            g,
            trainable,
            lifted: RefCell::new(BTreeMap::new()),
        }
    }

    /// Var for a parameter, lifting it on first use.
    pub fn p(&self, param: &Param) -> Var {
        if let Some(v) = self.lifted.borrow().get(&param.id) {
            return *v;
        }
        let v = if self.trainable {
            self.g.param(param.value.clone())
        } else {
            self.g.constant(param.value.clone())
        };
        self.lifted.borrow_mut().insert(param.id, v);
        v
    }

    /// Var of an already-lifted parameter, if any.
    pub fn var_for(&self, param: &Param) -> Option<Var> {
        self.lifted.borrow().get(&param.id).copied()
    }
}

/// Parameter and buffer traversal used by the optimizer, checkpoints, and
/// freeze audits.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
    /// Non-learnable state (e.g. batch-norm running statistics).
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Tensor)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

/// All named tensors (params then buffers) of a module.
pub fn named_tensors(m: &dyn Module, prefix: &str) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    m.visit_params(prefix, &mut |n, p| {
        out.insert(n.to_string(), p.value.clone());
    });
    m.visit_buffers(prefix, &mut |n, t| {
        out.insert(n.to_string(), t.clone());
    });
    out
}

/// FNV-1a over the little-endian f64 bytes of every tensor, in name order.
/// Used by freeze audits.
pub fn checksum(m: &dyn Module, prefix: &str) -> u64 {
    let tensors = named_tensors(m, prefix);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in &tensors {
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        for v in t.iter() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    h
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("normal tensor shape")
}

/// Fully connected layer; weight is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    /// Fan-in scaled init, zero bias.
    pub fn new(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: Param::new(normal_tensor(rng, &[in_dim, out_dim], std)),
            b: Param::new(Tensor::zeros(IxDyn(&[out_dim]))),
        }
    }

    /// Fresh-layer init used when transplanting: normal(0, 0.02), zero bias.
    pub fn new_fresh(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Param::new(normal_tensor(rng, &[in_dim, out_dim], 0.02)),
            b: Param::new(Tensor::zeros(IxDyn(&[out_dim]))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    /// `x` is `[N, in]`.
    pub fn forward(&self, cx: &Cx, x: Var) -> Var {
        let g = cx.g;
        let y = g.matmul(x, cx.p(&self.w));
        let out = self.out_dim();
        let b = g.reshape(cx.p(&self.b), &[1, out]);
        g.add(y, b)
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// 2-D convolution via im2col; weight is `[Cin*k*k, Cout]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Param::new(normal_tensor(rng, &[fan_in, out_ch], std)),
            b: Param::new(Tensor::zeros(IxDyn(&[out_ch]))),
            in_ch,
            out_ch,
            spec: ConvSpec { kernel, stride, pad },
        }
    }

    pub fn new_fresh(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            w: Param::new(normal_tensor(rng, &[fan_in, out_ch], 0.02)),
            b: Param::new(Tensor::zeros(IxDyn(&[out_ch]))),
            in_ch,
            out_ch,
            spec: ConvSpec { kernel, stride, pad },
        }
    }

    /// `x` is `[N, Cin, H, W]`; returns `[N, Cout, OH, OW]`.
    pub fn forward(&self, cx: &Cx, x: Var) -> Var {
        let g = cx.g;
        let shape = g.shape(x);
        debug_assert_eq!(shape[1], self.in_ch, "conv input channels");
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let (oh, ow) = self.spec.out_hw(h, w);
        let cols = g.im2col(x, self.spec);
        let y = g.matmul(cols, cx.p(&self.w));
        let b = g.reshape(cx.p(&self.b), &[1, self.out_ch]);
        let y = g.add(y, b);
        let y = g.reshape(y, &[n, oh, ow, self.out_ch]);
        g.permute(y, &[0, 3, 1, 2])
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Per-channel affine modulation from a style vector (scale around identity).
#[derive(Clone, Debug)]
pub struct StyleMod {
    pub affine: Linear,
    pub channels: usize,
}

impl StyleMod {
    pub fn new(rng: &mut impl Rng, style_dim: usize, channels: usize) -> Self {
        // Small init keeps the modulation near identity early in training
        // while still depending on the style input.
        Self {
            affine: Linear {
                w: Param::new(normal_tensor(rng, &[style_dim, 2 * channels], 0.05)),
                b: Param::new(Tensor::zeros(IxDyn(&[2 * channels]))),
            },
            channels,
        }
    }

    /// `x` is `[N, C, H, W]`, `style` is `[N, D]`.
    pub fn forward(&self, cx: &Cx, x: Var, style: Var) -> Var {
        let g = cx.g;
        let n = g.shape(x)[0];
        let c = self.channels;
        let sb = self.affine.forward(cx, style);
        let scale = g.slice_axis(sb, 1, 0, c);
        let shift = g.slice_axis(sb, 1, c, c);
        let scale = g.reshape(scale, &[n, c, 1, 1]);
        let shift = g.reshape(shift, &[n, c, 1, 1]);
        let gain = g.shift(scale, 1.0);
        let y = g.mul(x, gain);
        g.add(y, shift)
    }
}

impl Module for StyleMod {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.affine.visit_params(&format!("{prefix}.affine"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.affine.visit_params_mut(&format!("{prefix}.affine"), f);
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch normalization over `(N, H, W)` per channel.
#[derive(Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: RefCell<Tensor>,
    pub running_var: RefCell<Tensor>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(IxDyn(&[channels]))),
            beta: Param::new(Tensor::zeros(IxDyn(&[channels]))),
            running_mean: RefCell::new(Tensor::zeros(IxDyn(&[channels]))),
            running_var: RefCell::new(Tensor::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    pub fn forward(&self, cx: &Cx, x: Var, mode: BnMode) -> Result<Var> {
        let g = cx.g;
        let shape = g.shape(x);
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        debug_assert_eq!(c, self.channels);
        let (mean, var) = match mode {
            BnMode::Train => {
                if n == 1 {
                    return Err(Error::config(
                        "batch-norm in training mode requires batch size > 1 \
                         (statistics of a single sample are degenerate)",
                    ));
                }
                let count = (n * h * w) as f64;
                let mean = g.scale(g.sum_to(x, &[1, c, 1, 1]), 1.0 / count);
                let centered = g.sub(x, mean);
                let var = g.scale(g.sum_to(g.square(centered), &[1, c, 1, 1]), 1.0 / count);
                // Track running statistics outside the graph.
                let m = self.momentum;
                let mean_b = g.value(mean);
                let var_b = g.value(var);
                {
                    let mut rm = self.running_mean.borrow_mut();
                    let mut rv = self.running_var.borrow_mut();
                    for i in 0..c {
                        let bm = mean_b[[0, i, 0, 0]];
                        let bv = var_b[[0, i, 0, 0]];
                        rm[i] = (1.0 - m) * rm[i] + m * bm;
                        rv[i] = (1.0 - m) * rv[i] + m * bv;
                    }
                }
                (mean, var)
            }
            BnMode::Eval => {
                let rm = self.running_mean.borrow().clone();
                let rv = self.running_var.borrow().clone();
                let mean = g.reshape(g.constant(rm), &[1, c, 1, 1]);
                let var = g.reshape(g.constant(rv), &[1, c, 1, 1]);
                (mean, var)
            }
        };
        let centered = g.sub(x, mean);
        let denom = g.sqrt(g.shift(var, self.eps));
        let norm = g.div(centered, denom);
        let gamma = g.reshape(cx.p(&self.gamma), &[1, c, 1, 1]);
        let beta = g.reshape(cx.p(&self.beta), &[1, c, 1, 1]);
        Ok(g.add(g.mul(norm, gamma), beta))
    }
}

impl Clone for BatchNorm2d {
    fn clone(&self) -> Self {
        Self {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: RefCell::new(self.running_mean.borrow().clone()),
            running_var: RefCell::new(self.running_var.borrow().clone()),
            momentum: self.momentum,
            eps: self.eps,
            channels: self.channels,
        }
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.running_mean"), &self.running_mean.borrow());
        f(&format!("{prefix}.running_var"), &self.running_var.borrow());
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean.borrow_mut());
        f(&format!("{prefix}.running_var"), &mut self.running_var.borrow_mut());
    }
}

/// Adam with per-parameter state keyed by name.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (Tensor, Tensor, u64)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, value: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(value.shape(), grad.shape(), "adam shape for {name}");
        let (m, v, t) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(grad.raw_dim()), Tensor::zeros(grad.raw_dim()), 0));
        *t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        ndarray::Zip::from(m.view_mut()).and(grad).for_each(|mi, &gi| {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        });
        ndarray::Zip::from(v.view_mut()).and(grad).for_each(|vi, &gi| {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        });
        let bc1 = 1.0 - b1.powi(*t as i32);
        let bc2 = 1.0 - b2.powi(*t as i32);
        let lr = self.lr;
        let eps = self.eps;
        ndarray::Zip::from(value.view_mut())
            .and(&*m)
            .and(&*v)
            .for_each(|p, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
    }
}

/// Gradients of `loss` for every lifted parameter of the given modules,
/// keyed by parameter name. One backward sweep covers all of them.
pub fn grads_by_name(
    g: &Graph,
    cx: &Cx,
    loss: Var,
    modules: &[(&str, &dyn Module)],
) -> BTreeMap<String, Tensor> {
    let mut names = Vec::new();
    let mut vars = Vec::new();
    for (prefix, m) in modules {
        m.visit_params(prefix, &mut |name, p| {
            if let Some(v) = cx.var_for(p) {
                names.push(name.to_string());
                vars.push(v);
            }
        });
    }
    let grads = g.grads(loss, &vars);
    names
        .into_iter()
        .zip(grads)
        .filter_map(|(n, gv)| gv.map(|v| (n, (*g.value(v)).clone())))
        .collect()
}

/// Apply Adam updates to every parameter that has a gradient entry.
pub fn apply_grads(
    adam: &mut Adam,
    module: &mut dyn Module,
    prefix: &str,
    grads: &BTreeMap<String, Tensor>,
) {
    module.visit_params_mut(prefix, &mut |name, p| {
        if let Some(grad) = grads.get(name) {
            adam.step(name, &mut p.value, grad);
        }
    });
}

/// Row-stack a batch of 1-D tensors into `[N, D]`.
pub fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut out = Array2::zeros((n, d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}
