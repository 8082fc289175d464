//! Layer normalization and the pieces of batch normalization.
//!
//! Batch norm is split into [`Var::channel_mean`], [`Var::channel_var`] and
//! [`Var::bn_normalize`] so batch statistics are ordinary differentiable
//! values: train mode normalizes with them, inversion mode feeds them to the
//! feature-statistics regularizer while normalizing with the running
//! estimates.
//!
//! Running statistics follow `running = (1 - m) * running + m * batch` with
//! momentum `m = 0.1` and the biased batch variance.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

/// `(batch, channels, spatial)` extents of a `[B, C, ...]` tensor.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape { op, shape: shape.to_vec(), reason: "expected [B, C, ...]".into() });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Batch statistics of one normalization layer.
pub struct BatchNormStats<'g, T: Element> {
    pub mean: Var<'g, T>,
    pub var: Var<'g, T>,
}

impl<'g, T: Element> Var<'g, T> {
    /// Last-axis normalization followed by `gain * x_hat + bias`.
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let xv = self.value();
        let width = *xv.shape().last().unwrap_or(&1);
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [width] || bv.shape() != [width] {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: xv.shape().to_vec(), rhs: gv.shape().to_vec() });
        }
        let rows = xv.numel() / width;
        let wn = T::lit(width as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xv.data().chunks(width) {
            let mean = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let out: Vec<T> = xhat.chunks(width).flat_map(|r| r.iter().zip(gv.data().iter().zip(bv.data())).map(|(&h, (&g, &b))| g * h + b)).collect();
        let shape = xv.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, need: &[bool]| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = Vec::with_capacity(gd.len());
                for ((grow, hrow), &inv) in gd.chunks(width).zip(xhat.chunks(width)).zip(&inv_std) {
                    // dxhat = g * gain; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for ((&gi, &hi), &ga) in grow.iter().zip(hrow).zip(gv.data()) {
                        let d = gi * ga;
                        m1 += d;
                        m2 += d * hi;
                    }
                    m1 /= wn;
                    m2 /= wn;
                    gx.extend(grow.iter().zip(hrow).zip(gv.data()).map(|((&gi, &hi), &ga)| inv * (gi * ga - m1 - hi * m2)));
                }
                Tensor::from_parts(shape.clone(), gx)
            });
            let ggain = need[1].then(|| {
                let mut acc = vec![T::zero(); width];
                for (grow, hrow) in gd.chunks(width).zip(xhat.chunks(width)) {
                    for ((a, &gi), &hi) in acc.iter_mut().zip(grow).zip(hrow) {
                        *a += gi * hi;
                    }
                }
                Tensor::from_parts(vec![width], acc)
            });
            let gbias = need[2].then(|| {
                let mut acc = vec![T::zero(); width];
                for grow in gd.chunks(width) {
                    for (a, &gi) in acc.iter_mut().zip(grow) {
                        *a += gi;
                    }
                }
                Tensor::from_parts(vec![width], acc)
            });
            vec![gx, ggain, gbias]
        });
        Ok(self.graph().push_op(out, &[self, gain, bias], backward))
    }

    /// Per-channel mean of a `[B, C, ...]` tensor over batch and spatial axes.
    pub fn channel_mean(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (b, c, s) = channel_layout("channel_mean", xv.shape())?;
        let count = T::lit((b * s) as f64);
        let mean = channel_mean_values(&xv, b, c, s);
        let shape = xv.shape().to_vec();
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            let mut gx = Vec::with_capacity(b * c * s);
            for _ in 0..b {
                for &gc in g.data() {
                    gx.extend(core::iter::repeat_n(gc / count, s));
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        });
        Ok(self.graph().push_op(Tensor::from_parts(vec![c], mean), &[self], backward))
    }

    /// Per-channel biased variance over batch and spatial axes.
    #[allow(clippy::needless_range_loop)]
    pub fn channel_var(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (b, c, s) = channel_layout("channel_var", xv.shape())?;
        let mean = channel_mean_values(&xv, b, c, s);
        let count = T::lit((b * s) as f64);
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for &v in &xv.data()[base..base + s] {
                    let d = v - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= count;
        }
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            let two = T::lit(2.0);
            let mut gx = Vec::with_capacity(b * c * s);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * s;
                    let k = two * g.data()[ci] / count;
                    gx.extend(xv.data()[base..base + s].iter().map(|&v| k * (v - mean[ci])));
                }
            }
            vec![Some(Tensor::from_parts(xv.shape().to_vec(), gx))]
        });
        Ok(self.graph().push_op(Tensor::from_parts(vec![c], var), &[self], backward))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel of `[B, C, ...]`.
    #[allow(clippy::needless_range_loop)]
    pub fn bn_normalize(self, mean: Var<'g, T>, var: Var<'g, T>, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (b, c, s) = channel_layout("bn_normalize", xv.shape())?;
        let (mv, vv, gv, bv) = (mean.value(), var.value(), gamma.value(), beta.value());
        for p in [&mv, &vv, &gv, &bv] {
            if p.shape() != [c] {
                return Err(Error::ShapeMismatch { op: "batch_norm", lhs: xv.shape().to_vec(), rhs: p.shape().to_vec() });
            }
        }
        let inv: Vec<T> = vv.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(xv.numel());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                let (m, k, g0, b0) = (mv.data()[ci], inv[ci], gv.data()[ci], bv.data()[ci]);
                out.extend(xv.data()[base..base + s].iter().map(|&v| g0 * (v - m) * k + b0));
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let backward = Box::new(move |g: &Tensor<T>, need: &[bool]| {
            let gd = g.data();
            let xd = xv.data();
            // Per-channel sums of g and g * (x - mean).
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gc = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * s;
                    let m = mv.data()[ci];
                    for (&gi, &xi) in gd[base..base + s].iter().zip(&xd[base..base + s]) {
                        sum_g[ci] += gi;
                        sum_gc[ci] += gi * (xi - m);
                    }
                }
            }
            let gx = need[0].then(|| {
                let mut gx = Vec::with_capacity(xd.len());
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        let k = gv.data()[ci] * inv[ci];
                        gx.extend(gd[base..base + s].iter().map(|&gi| gi * k));
                    }
                }
                Tensor::from_parts(xv.shape().to_vec(), gx)
            });
            let gmean = need[1].then(|| Tensor::from_parts(vec![c], (0..c).map(|ci| -gv.data()[ci] * inv[ci] * sum_g[ci]).collect()));
            let gvar = need[2].then(|| {
                let half = T::lit(-0.5);
                Tensor::from_parts(vec![c], (0..c).map(|ci| half * gv.data()[ci] * sum_gc[ci] * inv[ci] * inv[ci] * inv[ci]).collect())
            });
            let ggamma = need[3].then(|| Tensor::from_parts(vec![c], (0..c).map(|ci| sum_gc[ci] * inv[ci]).collect()));
            let gbeta = need[4].then(|| Tensor::from_parts(vec![c], sum_g.clone()));
            vec![gx, gmean, gvar, ggamma, gbeta]
        });
        Ok(self.graph().push_op(out, &[self, mean, var, gamma, beta], backward))
    }
}

pub(crate) fn channel_mean_values<T: Element>(x: &Tensor<T>, b: usize, c: usize, s: usize) -> Vec<T> {
    let mut mean = vec![T::zero(); c];
    for bi in 0..b {
        for (ci, m) in mean.iter_mut().enumerate() {
            let base = (bi * c + ci) * s;
            for &v in &x.data()[base..base + s] {
                *m += v;
            }
        }
    }
    let count = T::lit((b * s) as f64);
    for m in &mut mean {
        *m /= count;
    }
    mean
}

/// Normalization mode of a batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; the caller folds them into the
    /// running estimates.
    Train,
    /// Normalize with running statistics.
    Eval,
    /// Normalize with running statistics and also expose differentiable
    /// batch statistics; running estimates stay untouched.
    Invert,
}

/// Output of [`batch_norm`].
pub struct BatchNormOutput<'g, T: Element> {
    pub output: Var<'g, T>,
    /// Batch statistics in `Train` and `Invert` modes.
    pub stats: Option<BatchNormStats<'g, T>>,
}

/// Batch normalization of a `[B, C, ...]` tensor.
///
/// Train and invert modes reject a batch of one: the regularizer that
/// consumes batch statistics needs a spread over samples.
pub fn batch_norm<'g, T: Element>(
    x: Var<'g, T>,
    gamma: Var<'g, T>,
    beta: Var<'g, T>,
    running_mean: Var<'g, T>,
    running_var: Var<'g, T>,
    eps: T,
    mode: BnMode,
) -> Result<BatchNormOutput<'g, T>> {
    let shape = x.shape();
    let (b, _, _) = channel_layout("batch_norm", &shape)?;
    if mode != BnMode::Eval && b < 2 {
        return Err(Error::BatchTooSmall { op: "batch_norm", size: b });
    }
    match mode {
        BnMode::Eval => Ok(BatchNormOutput { output: x.bn_normalize(running_mean, running_var, gamma, beta, eps)?, stats: None }),
        BnMode::Train => {
            let mean = x.channel_mean()?;
            let var = x.channel_var()?;
            let output = x.bn_normalize(mean, var, gamma, beta, eps)?;
            Ok(BatchNormOutput { output, stats: Some(BatchNormStats { mean, var }) })
        }
        BnMode::Invert => {
            let mean = x.channel_mean()?;
            let var = x.channel_var()?;
            let output = x.bn_normalize(running_mean, running_var, gamma, beta, eps)?;
            Ok(BatchNormOutput { output, stats: Some(BatchNormStats { mean, var }) })
        }
    }
}

/// Folds batch statistics into running estimates with [`BN_MOMENTUM`].
pub fn update_running<T: Element>(running: &mut Tensor<T>, batch: &Tensor<T>) {
    let m = T::lit(BN_MOMENTUM);
    for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = (T::one() - m) * *r + m * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn constant_row_normalizes_to_zero() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[2, 4], 3.0));
        let y = x.layer_norm(g.constant(Tensor::ones(&[4])), g.constant(Tensor::zeros(&[4])), 1e-5).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_values_normalize_to_unit() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[1, 2], &[1.0, 3.0]).unwrap());
        let y = x.layer_norm(g.constant(Tensor::ones(&[2])), g.constant(Tensor::zeros(&[2])), 0.0).unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn batch_stats_by_hand() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[2, 1], &[0.0, 2.0]).unwrap());
        let one = g.constant(Tensor::ones(&[1]));
        let zero = g.constant(Tensor::zeros(&[1]));
        let out = batch_norm(x, one, zero, zero, one, 1e-5, BnMode::Train).unwrap();
        let stats = out.stats.unwrap();
        assert_eq!(stats.mean.value().data(), &[1.0]);
        assert_eq!(stats.var.value().data(), &[1.0]);
    }

    #[test]
    fn eval_at_running_stats_standardizes() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap());
        let rm = g.constant(Tensor::from_f64(&[1], &[2.0]).unwrap());
        let rv = g.constant(Tensor::from_f64(&[1], &[2.0 / 3.0]).unwrap());
        let out = batch_norm(x, g.constant(Tensor::ones(&[1])), g.constant(Tensor::zeros(&[1])), rm, rv, 0.0, BnMode::Eval).unwrap();
        let y = out.output.value();
        let s = (2.0f64 / 3.0).sqrt();
        for (v, want) in y.data().iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_rejects_single_sample() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let p = g.constant(Tensor::ones(&[2]));
        assert!(matches!(batch_norm(x, p, p, p, p, 1e-5, BnMode::Train), Err(Error::BatchTooSmall { size: 1, .. })));
        assert!(batch_norm(x, p, p, p, p, 1e-5, BnMode::Eval).is_ok());
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut r = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        update_running(&mut r, &Tensor::from_f64(&[1], &[2.0]).unwrap());
        assert!((r.data()[0] - 1.1).abs() < 1e-15);
    }
}
