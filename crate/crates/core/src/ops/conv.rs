//! 2-D cross-correlation (im2col + GEMM) and bilinear resizing.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::{gemm, Element, MatView};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    /// Stride 1 with "same" zero padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Conv2dSpec { stride: 1, pad: (kernel - 1) / 2, groups: 1 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn cg(&self) -> usize {
        self.c_in / self.spec.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.spec.groups
    }

    fn col_rows(&self) -> usize {
        self.cg() * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Geometry> {
    let mismatch = || Error::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() };
    if x.len() != 4 || w.len() != 4 || spec.groups == 0 || spec.stride == 0 {
        return Err(mismatch());
    }
    let (batch, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
    let (c_out, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidShape { op: "conv2d", shape: w.to_vec(), reason: "kernel must be square with odd extent".into() });
    }
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 || cg * spec.groups != c_in {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: w.to_vec(),
            reason: format!("{c_in} input / {c_out} output channels incompatible with {} groups", spec.groups),
        });
    }
    if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
        return Err(mismatch());
    }
    let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
    let wo = (wd + 2 * spec.pad - kw) / spec.stride + 1;
    Ok(Geometry { batch, c_in, h, w: wd, c_out, k: kh, ho, wo, spec })
}

/// Output columns `[lo, hi)` whose input column `ox * s + kx - p` is in range.
fn valid_cols(geo: &Geometry, kx: usize) -> (usize, usize) {
    let (s, p) = (geo.spec.stride, geo.spec.pad);
    let lo = p.saturating_sub(kx).div_ceil(s).min(geo.wo);
    // Largest ox with ox * s + kx - p <= w - 1.
    let hi = if geo.w + p > kx { ((geo.w + p - kx - 1) / s + 1).min(geo.wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Fills `col` (`[cg*k*k, ho*wo]`) from one image and one channel group.
fn im2col<T: Element>(img: &[T], geo: &Geometry, group: usize, col: &mut [T]) {
    let (k, s, p) = (geo.k, geo.spec.stride, geo.spec.pad);
    let plane = geo.h * geo.w;
    let ncol = geo.col_cols();
    for c in 0..geo.cg() {
        let src = &img[(group * geo.cg() + c) * plane..(group * geo.cg() + c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * ncol..((c * k + ky) * k + kx + 1) * ncol];
                let (lo, hi) = valid_cols(geo, kx);
                for oy in 0..geo.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut row[oy * geo.wo..(oy + 1) * geo.wo];
                    if iy < 0 || iy as usize >= geo.h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * s + kx - p;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&line[start..start + hi - lo]);
                        } else {
                            for (d, &v) in dst[lo..hi].iter_mut().zip(line[start..].iter().step_by(s)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into one image's channel group.
fn col2im<T: Element>(col: &[T], geo: &Geometry, group: usize, img: &mut [T]) {
    let (k, s, p) = (geo.k, geo.spec.stride, geo.spec.pad);
    let plane = geo.h * geo.w;
    let ncol = geo.col_cols();
    for c in 0..geo.cg() {
        let dst = &mut img[(group * geo.cg() + c) * plane..(group * geo.cg() + c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * ncol..((c * k + ky) * k + kx + 1) * ncol];
                let (lo, hi) = valid_cols(geo, kx);
                if lo >= hi {
                    continue;
                }
                let start = lo * s + kx - p;
                for oy in 0..geo.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy as usize >= geo.h {
                        continue;
                    }
                    let line = &mut dst[iy as usize * geo.w + start..(iy as usize + 1) * geo.w];
                    let src = &row[oy * geo.wo + lo..oy * geo.wo + hi];
                    for (d, &v) in line.iter_mut().step_by(s).zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, geo: &Geometry) -> Tensor<T> {
    let (rows, ncol) = (geo.col_rows(), geo.col_cols());
    let in_img = geo.c_in * geo.h * geo.w;
    let out_img = geo.c_out * ncol;
    let mut out = vec![T::zero(); geo.batch * out_img];
    let mut col = vec![T::zero(); rows * ncol];
    for b in 0..geo.batch {
        let img = &x.data()[b * in_img..(b + 1) * in_img];
        for gi in 0..geo.spec.groups {
            im2col(img, geo, gi, &mut col);
            let wg = &w.data()[gi * geo.cog() * rows..(gi + 1) * geo.cog() * rows];
            let dst = &mut out[b * out_img + gi * geo.cog() * ncol..b * out_img + (gi + 1) * geo.cog() * ncol];
            gemm(T::one(), MatView::row_major(wg, geo.cog(), rows), MatView::row_major(&col, rows, ncol), T::zero(), dst);
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut out[b * out_img + o * ncol..b * out_img + (o + 1) * ncol] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_parts(vec![geo.batch, geo.c_out, geo.ho, geo.wo], out)
}

/// Cross-correlation on plain tensors, outside any tape.
pub fn conv2d_tensor<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let geo = geometry(x.shape(), w.shape(), spec)?;
    check_bias(bias.map(|b| b.shape()), geo.c_out)?;
    Ok(conv_forward(x, w, bias, &geo))
}

fn check_bias(shape: Option<&[usize]>, c_out: usize) -> Result<()> {
    match shape {
        Some(s) if s != [c_out] => Err(Error::ShapeMismatch { op: "conv2d bias", lhs: s.to_vec(), rhs: vec![c_out] }),
        _ => Ok(()),
    }
}

impl<'g, T: Element> Var<'g, T> {
    /// `x: [B, C_in, H, W]`, `w: [C_out, C_in / groups, K, K]`, optional
    /// `bias: [C_out]`.
    pub fn conv2d(self, w: Var<'g, T>, bias: Option<Var<'g, T>>, spec: Conv2dSpec) -> Result<Var<'g, T>> {
        let (xv, wv) = (self.value(), w.value());
        let geo = geometry(xv.shape(), wv.shape(), spec)?;
        let bv = bias.map(|b| b.value());
        check_bias(bv.as_deref().map(|b| b.shape()), geo.c_out)?;
        let out = conv_forward(&xv, &wv, bv.as_deref(), &geo);
        let backward = Box::new(move |g: &Tensor<T>, need: &[bool]| {
            let (rows, ncol) = (geo.col_rows(), geo.col_cols());
            let in_img = geo.c_in * geo.h * geo.w;
            let out_img = geo.c_out * ncol;
            let gd = g.data();
            let mut gx = need[0].then(|| vec![T::zero(); xv.numel()]);
            let mut gw = need[1].then(|| vec![T::zero(); wv.numel()]);
            let mut col = vec![T::zero(); rows * ncol];
            for b in 0..geo.batch {
                for gi in 0..geo.spec.groups {
                    let gout = &gd[b * out_img + gi * geo.cog() * ncol..b * out_img + (gi + 1) * geo.cog() * ncol];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&xv.data()[b * in_img..(b + 1) * in_img], &geo, gi, &mut col);
                        gemm(
                            T::one(),
                            MatView::row_major(gout, geo.cog(), ncol),
                            MatView::transposed(&col, rows, ncol),
                            T::one(),
                            &mut gw[gi * geo.cog() * rows..(gi + 1) * geo.cog() * rows],
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wg = &wv.data()[gi * geo.cog() * rows..(gi + 1) * geo.cog() * rows];
                        gemm(T::one(), MatView::transposed(wg, geo.cog(), rows), MatView::row_major(gout, geo.cog(), ncol), T::zero(), &mut col);
                        col2im(&col, &geo, gi, &mut gx[b * in_img..(b + 1) * in_img]);
                    }
                }
            }
            let mut grads = vec![gx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)), gw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d))];
            if need.len() > 2 {
                grads.push(need[2].then(|| {
                    let mut gb = vec![T::zero(); geo.c_out];
                    for b in 0..geo.batch {
                        for (o, acc) in gb.iter_mut().enumerate() {
                            *acc += gd[b * out_img + o * ncol..b * out_img + (o + 1) * ncol].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_parts(vec![geo.c_out], gb)
                }));
            }
            grads
        });
        let graph = self.graph();
        Ok(match bias {
            Some(b) => graph.push_op(out, &[self, w, b], backward),
            None => graph.push_op(out, &[self, w], backward),
        })
    }

    /// Bilinear resize of `[B, C, H, W]`, `align_corners = false`: output
    /// pixel `i` samples the input at `(i + 0.5) * in / out - 0.5`, clamped
    /// at zero, with the upper neighbor clamped to the last row/column.
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let xv = self.value();
        if xv.rank() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidShape { op: "bilinear_resize", shape: xv.shape().to_vec(), reason: format!("cannot resize to {out_h}x{out_w}") });
        }
        let out = bilinear_resize_tensor(&xv, out_h, out_w)?;
        let shape = xv.shape().to_vec();
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            let (h, w) = (shape[2], shape[3]);
            let ys = sample_axis::<T>(h, out_h);
            let xs = sample_axis::<T>(w, out_w);
            let planes = shape[0] * shape[1];
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let src = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                        let gv = src[oy * out_w + ox];
                        let one = T::one();
                        dst[y0 * w + x0] += gv * (one - ly) * (one - lx);
                        dst[y0 * w + x1] += gv * (one - ly) * lx;
                        dst[y1 * w + x0] += gv * ly * (one - lx);
                        dst[y1 * w + x1] += gv * ly * lx;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        });
        Ok(self.graph().push_op(out, &[self], backward))
    }
}

/// `(lower, upper, weight of upper)` for every output coordinate.
fn sample_axis<T: Element>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::lit(src - lo as f64))
        })
        .collect()
}

pub fn bilinear_resize_tensor<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape { op: "bilinear_resize", shape: x.shape().to_vec(), reason: format!("cannot resize to {out_h}x{out_w}") });
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ys = sample_axis::<T>(h, out_h);
    let xs = sample_axis::<T>(w, out_w);
    let planes = x.shape()[0] * x.shape()[1];
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let one = T::one();
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = src[y0 * w + x0] * (one - lx) + src[y0 * w + x1] * lx;
                let bottom = src[y1 * w + x0] * (one - lx) + src[y1 * w + x1] * lx;
                out.push(top * (one - ly) + bottom * ly);
            }
        }
    }
    Ok(Tensor::from_parts(vec![x.shape()[0], x.shape()[1], out_h, out_w], out))
}
