//! Parameterized building blocks shared by the models and aligners.

use alloc::format;

use crate::element::Element;
use crate::error::Result;
use crate::graph::Var;
use crate::ops::{batch_norm, BatchNormOutput, BnMode, Conv2dSpec};
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Truncated-normal weights with standard deviation `std`, zero bias.
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, inp: usize, out: usize, std: f64, rng: &mut RngStream) -> Result<Self> {
        let mut w = Tensor::zeros(&[inp, out]);
        rng.fill_trunc_normal(w.data_mut(), std);
        let weight = store.insert(&format!("{prefix}.weight"), w, true)?;
        let bias = store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[out]), true)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<'g, T: Element>(&self, b: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(b[self.weight])?.add(b[self.bias])
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Layer norm over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Result<Self> {
        let gain = store.insert(&format!("{prefix}.gain"), Tensor::ones(&[width]), true)?;
        let bias = store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[width]), true)?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<'g, T: Element>(&self, b: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(b[self.gain], b[self.bias], T::lit(LN_EPS))
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Batch norm over the channel axis of `[B, C, H, W]`. Running statistics
/// are stored as non-trainable parameters.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.insert(&format!("{prefix}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.insert(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.insert(&format!("{prefix}.running_var"), Tensor::ones(&[channels]), false)?,
        })
    }

    pub fn forward<'g, T: Element>(&self, b: &Bound<'g, T>, x: Var<'g, T>, mode: BnMode) -> Result<BatchNormOutput<'g, T>> {
        batch_norm(x, b[self.gamma], b[self.beta], b[self.running_mean], b[self.running_var], T::lit(BN_EPS), mode)
    }
}

/// Bias-free square convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// He-normal init, `std = sqrt(2 / fan_in)`.
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, inp: usize, out: usize, kernel: usize, stride: usize, rng: &mut RngStream) -> Result<Self> {
        let mut w = Tensor::zeros(&[out, inp, kernel, kernel]);
        let fan_in = (inp * kernel * kernel) as f64;
        rng.fill_normal(w.data_mut(), (2.0 / fan_in).sqrt());
        let weight = store.insert(&format!("{prefix}.weight"), w, true)?;
        Ok(Conv2d { weight, spec: Conv2dSpec::same(kernel).with_stride(stride) })
    }

    pub fn forward<'g, T: Element>(&self, b: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(b[self.weight], None, self.spec)
    }
}

/// Extracts every non-overlapping `p x p` patch: `[B, C, H, W]` to
/// `[B, (H/p)(W/p), C p p]` with patches in row-major grid order.
pub fn patchify<'g, T: Element>(x: Var<'g, T>, p: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 || p == 0 || !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
        return Err(crate::error::Error::InvalidShape { op: "patchify", shape: s, reason: format!("spatial extents must be divisible by patch size {p}") });
    }
    let (b, c, gh, gw) = (s[0], s[1], s[2] / p, s[3] / p);
    x.reshape(&[b, c, gh, p, gw, p])?.permute(&[0, 2, 4, 1, 3, 5])?.reshape(&[b, gh * gw, c * p * p])
}
