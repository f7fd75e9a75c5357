//! Minimal neural-network substrate: parameter store, conv/linear layers with
//! hand-written backward passes, Adam, and deterministic parallel gradient
//! accumulation.
//!
//! Everything is `f32`, runs on the CPU, and is bit-deterministic: matrix
//! products go through `ndarray`'s single-threaded GEMM, and batch-parallel
//! work is split into fixed-size chunks whose partial gradients are combined
//! in chunk order, independent of the worker count.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, ArrayD<f32>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f32>) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get2<'a>(&'a self, name: &str) -> ArrayView2<'a, f32> {
        self.get(name).view().into_dimensionality().expect("2-d parameter")
    }

    pub fn get1<'a>(&'a self, name: &str) -> ndarray::ArrayView1<'a, f32> {
        self.get(name).view().into_dimensionality().expect("1-d parameter")
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f32>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    map: BTreeMap<String, ArrayD<f32>>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, grad: ArrayD<f32>) {
        match self.map.get_mut(name) {
            Some(g) => *g += &grad,
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.map.get(name)
    }

    pub fn merge(&mut self, other: Grads) {
        for (name, grad) in other.map {
            match self.map.get_mut(&name) {
                Some(g) => *g += &grad,
                None => {
                    self.map.insert(name, grad);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.map.iter()
    }
}

/// Map fixed-size chunks of `items` to partial gradients in parallel and
/// combine them in chunk order. The chunk size (not the worker count)
/// determines the summation order, so results do not depend on thread count.
pub fn accumulate_parallel<T, F>(items: &[T], chunk_size: usize, f: F) -> Grads
where
    T: Sync,
    F: Fn(&[T]) -> Grads + Sync,
{
    let partials: Vec<Grads> = items
        .par_chunks(chunk_size.max(1))
        .map(|chunk| f(chunk))
        .collect();
    let mut total = Grads::new();
    for p in partials {
        total.merge(p);
    }
    total
}

/// Uniform Kaiming-style init in `±sqrt(6 / fan_in)`.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound) as f32).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

// ---------------------------------------------------------------------------
// Convolution via im2col.
// ---------------------------------------------------------------------------

/// Spatial output size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `(C, H, W)` into `(out_h * out_w, C * k * k)` patches.
pub fn im2col(
    input: &ArrayView3<f32>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<f32> {
    let (c, h, w) = input.dim();
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let mut col = Array2::<f32>::zeros((oh * ow, c * kernel * kernel));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut idx = 0usize;
            for ci in 0..c {
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            col[(row, idx)] = input[(ci, iy as usize, ix as usize)];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    col
}

/// Fold patch gradients back onto the input grid (adjoint of [`im2col`]).
pub fn col2im(
    dcol: &ArrayView2<f32>,
    input_dim: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let (c, h, w) = input_dim;
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let mut dinput = Array3::<f32>::zeros((c, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut idx = 0usize;
            for ci in 0..c {
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            dinput[(ci, iy as usize, ix as usize)] += dcol[(row, idx)];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    dinput
}

/// `weight` is `(c_out, c_in * k * k)`, `bias` is `(c_out)`.
pub fn conv2d_forward(
    input: &ArrayView3<f32>,
    weight: &ArrayView2<f32>,
    bias: &ndarray::ArrayView1<f32>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let (_, h, w) = input.dim();
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let col = im2col(input, kernel, stride, pad);
    let mut out2d = col.dot(&weight.t());
    out2d += &bias.view().insert_axis(ndarray::Axis(0));
    let c_out = weight.dim().0;
    out2d
        .t()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((c_out, oh, ow))
        .expect("conv output shape")
}

/// Backward pass of [`conv2d_forward`]. Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &ArrayView3<f32>,
    weight: &ArrayView2<f32>,
    grad_out: &ArrayView3<f32>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Array3<f32>, Array2<f32>, Array1<f32>) {
    let (c_out, oh, ow) = grad_out.dim();
    let col = im2col(input, kernel, stride, pad);
    let go2d = grad_out
        .to_shape((c_out, oh * ow))
        .expect("grad reshape")
        .to_owned();
    let go2d_t = go2d.t().as_standard_layout().to_owned(); // (n_pos, c_out)
    let d_weight = go2d.dot(&col); // (c_out, c*k*k)
    let d_bias = go2d.sum_axis(ndarray::Axis(1));
    let dcol = go2d_t.dot(weight); // (n_pos, c*k*k)
    let d_input = col2im(&dcol.view(), input.dim(), kernel, stride, pad);
    (d_input, d_weight, d_bias)
}

// ---------------------------------------------------------------------------
// Dense layers and activations.
// ---------------------------------------------------------------------------

/// `y = x Wᵀ + b` with `x: (n, in)`, `weight: (out, in)`.
pub fn linear_forward(
    x: &ArrayView2<f32>,
    weight: &ArrayView2<f32>,
    bias: &ndarray::ArrayView1<f32>,
) -> Array2<f32> {
    let mut y = x.dot(&weight.t());
    y += &bias.view().insert_axis(ndarray::Axis(0));
    y
}

/// Returns `(d_x, d_weight, d_bias)`.
pub fn linear_backward(
    x: &ArrayView2<f32>,
    weight: &ArrayView2<f32>,
    grad_out: &ArrayView2<f32>,
) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
    let d_weight = grad_out.t().dot(x);
    let d_bias = grad_out.sum_axis(ndarray::Axis(0));
    let d_x = grad_out.dot(weight);
    (d_x, d_weight, d_bias)
}

pub fn relu_forward<D: ndarray::Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward<D: ndarray::Dimension>(
    out: &ndarray::Array<f32, D>,
    grad_out: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    let mut g = grad_out.clone();
    ndarray::Zip::from(&mut g).and(out).for_each(|gv, &ov| {
        if ov <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

pub fn elu(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

/// ELU derivative expressed through the forward output.
pub fn elu_grad_from_out(out: f32) -> f32 {
    if out > 0.0 {
        1.0
    } else {
        out + 1.0
    }
}

pub fn leaky_relu(v: f32, slope: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

pub fn leaky_relu_grad(pre: f32, slope: f32) -> f32 {
    if pre > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Numerically safe logistic in f64.
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(1e-12, 1.0 - 1e-12)
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

/// Per-parameter adaptive moment optimizer. Learning rates are resolved per
/// parameter-name prefix (`extractor.`, `gnn.`, `stn.`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    m: BTreeMap<String, ArrayD<f32>>,
    v: BTreeMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step<F>(&mut self, params: &mut Params, grads: &Grads, lr_for: F)
    where
        F: Fn(&str) -> f64,
    {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        for (name, g) in grads.iter() {
            if !params.contains(name) {
                continue;
            }
            let lr = lr_for(name);
            let alpha = (lr * bc2.sqrt() / bc1) as f32;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = params.get_mut(name);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|pv, mv, vv, &gv| {
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    *pv -= alpha * *mv / (vv.sqrt() + self.eps);
                });
        }
    }

    /// Moment tensors for checkpointing, prefixed `adam.m.` / `adam.v.`.
    pub fn state_tensors(&self) -> Vec<(String, &ArrayD<f32>)> {
        let mut out = Vec::new();
        for (k, v) in &self.m {
            out.push((format!("adam.m.{k}"), v));
        }
        for (k, v) in &self.v {
            out.push((format!("adam.v.{k}"), v));
        }
        out
    }

    pub fn restore_state(&mut self, t: u64, tensors: BTreeMap<String, ArrayD<f32>>) -> Result<()> {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (name, tensor) in tensors {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                self.m.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                self.v.insert(rest.to_string(), tensor);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor {name}")));
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
