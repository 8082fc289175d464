//! Multi-head self-attention and its convolutional variant.
//!
//! MHCA adds a per-head quadratic relative position score to the content
//! scores before the softmax:
//!
//! ```text
//! P_ij = <v_h, r_ij>,  v_h = -alpha_h (1, -2 D1, -2 D2),  r_ij = (|d|^2, d1, d2)
//! ```
//!
//! where `d = pos_j - pos_i` in patch-grid units (row, col) and `D` is the
//! head's learnable attention center. Pairs involving the CLS token use
//! `r = 0`. The width `alpha_h = softplus(alpha_raw_h)` stays positive.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::ops::concat;
use crate::ops::elementwise::softplus_inverse;
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// `<v, r_delta> = -alpha (|delta|^2 - 2 D1 delta1 - 2 D2 delta2)`.
pub fn relpos_score(delta: (f64, f64), center: (f64, f64), alpha: f64) -> f64 {
    let v = [-alpha, 2.0 * alpha * center.0, 2.0 * alpha * center.1];
    let r = [delta.0 * delta.0 + delta.1 * delta.1, delta.0, delta.1];
    v[0] * r[0] + v[1] * r[1] + v[2] * r[2]
}

/// Which attention flavour a layer computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttentionKind {
    Mhsa,
    Mhca,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    /// Per-head query/key width.
    pub qk_head_dim: usize,
    /// Per-head value width.
    pub v_head_dim: usize,
    /// Width of the output projection.
    pub out_dim: usize,
    pub rpe_dropout_p: f64,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Token 0 is CLS when set.
    pub has_cls: bool,
}

impl AttentionConfig {
    /// Square layer with `head_dim = model_dim / num_heads` throughout.
    pub fn new(model_dim: usize, num_heads: usize, grid: (usize, usize), has_cls: bool) -> Result<Self> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!("model dim {model_dim} is not divisible by {num_heads} heads")));
        }
        let head_dim = model_dim / num_heads;
        Ok(AttentionConfig { model_dim, num_heads, qk_head_dim: head_dim, v_head_dim: head_dim, out_dim: model_dim, rpe_dropout_p: 0.1, grid, has_cls })
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + usize::from(self.has_cls)
    }

    fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.qk_head_dim == 0 || self.v_head_dim == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::Config(format!("degenerate attention config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.rpe_dropout_p) {
            return Err(Error::Config(format!("rpe dropout {} outside [0, 1)", self.rpe_dropout_p)));
        }
        Ok(())
    }
}

/// Relative offsets of every token pair, encoded as `r = (|d|^2, d1, d2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosTable<T> {
    pub grid: (usize, usize),
    pub has_cls: bool,
    /// `[3, T*T]`: row `k` holds component `k` of `r` for pair `(i, j)` at
    /// column `i*T + j`. CLS pairs are zero.
    encodings: Tensor<T>,
}

impl<T: Element> RelPosTable<T> {
    pub fn new(grid: (usize, usize), has_cls: bool) -> Self {
        let t = grid.0 * grid.1 + usize::from(has_cls);
        let mut enc = vec![T::zero(); 3 * t * t];
        let table = RelPosTable { grid, has_cls, encodings: Tensor::zeros(&[1]) };
        for i in 0..t {
            for j in 0..t {
                if let Some((d1, d2)) = table.offset(i, j) {
                    let (d1, d2) = (d1 as f64, d2 as f64);
                    let col = i * t + j;
                    enc[col] = T::lit(d1 * d1 + d2 * d2);
                    enc[t * t + col] = T::lit(d1);
                    enc[2 * t * t + col] = T::lit(d2);
                }
            }
        }
        RelPosTable { encodings: Tensor::from_parts(vec![3, t * t], enc), ..table }
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + usize::from(self.has_cls)
    }

    /// Grid position `(row, col)` of token `i`, `None` for CLS.
    pub fn position(&self, i: usize) -> Option<(isize, isize)> {
        let p = i.checked_sub(usize::from(self.has_cls))?;
        Some(((p / self.grid.1) as isize, (p % self.grid.1) as isize))
    }

    /// `pos_j - pos_i`, `None` if either token is CLS.
    pub fn offset(&self, i: usize, j: usize) -> Option<(isize, isize)> {
        let (pi, pj) = (self.position(i)?, self.position(j)?);
        Some((pj.0 - pi.0, pj.1 - pi.1))
    }

    pub fn encodings(&self) -> &Tensor<T> {
        &self.encodings
    }

    /// Position scores `[H, T, T]` for widths `alpha` (already positive) and
    /// centers `centers`.
    pub fn scores(&self, alpha: &[f64], centers: &[(f64, f64)]) -> Tensor<f64> {
        let t = self.tokens();
        let mut out = Vec::with_capacity(alpha.len() * t * t);
        for (&a, &c) in alpha.iter().zip(centers) {
            for i in 0..t {
                for j in 0..t {
                    out.push(match self.offset(i, j) {
                        Some((d1, d2)) => relpos_score((d1 as f64, d2 as f64), c, a),
                        None => 0.0,
                    });
                }
            }
        }
        Tensor::from_parts(vec![alpha.len(), t, t], out)
    }
}

/// Output of one attention layer.
pub struct AttentionOutput<'g, T: Element> {
    pub output: Var<'g, T>,
    /// `[B, H, T, T]`, rows sum to one.
    pub attn: Var<'g, T>,
}

/// Parameter handles of the adaptive relative position encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelPosParams {
    /// `[H, 1]` pre-softplus widths.
    pub alpha_raw: ParamId,
    /// `[H, 2]` centers `(D1, D2)`.
    pub center: ParamId,
}

/// Per-head widths `alpha` and centers `(d1, d2)`.
pub type HeadParams = (Vec<f64>, Vec<(f64, f64)>);

/// An MHSA or MHCA layer whose weights live in a [`ParamStore`].
///
/// Projections act on the right: `q = x W_q + b_q` with `W_q` of shape
/// `[model_dim, H * qk_head_dim]`.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub config: AttentionConfig,
    pub kind: AttentionKind,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub rpe: Option<RelPosParams>,
    table: RelPosTable<T>,
}

fn trunc_normal<T: Element>(shape: &[usize], rng: &mut RngStream) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    rng.fill_trunc_normal(t.data_mut(), INIT_STD);
    t
}

impl<T: Element> Attention<T> {
    /// Registers a freshly initialized layer under `prefix`.
    ///
    /// Weights are truncated normal, biases zero; MHCA heads start with
    /// `alpha = 1` and centers uniform in `[-2, 2]^2`.
    pub fn new(store: &mut ParamStore<T>, prefix: &str, config: AttentionConfig, kind: AttentionKind, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.model_dim, config.num_heads);
        let (qk, v) = (h * config.qk_head_dim, h * config.v_head_dim);
        let name = |s: &str| -> String { format!("{prefix}.{s}") };
        let wq = store.insert(&name("q.weight"), trunc_normal(&[d, qk], rng), true)?;
        let bq = store.insert(&name("q.bias"), Tensor::zeros(&[qk]), true)?;
        let wk = store.insert(&name("k.weight"), trunc_normal(&[d, qk], rng), true)?;
        let bk = store.insert(&name("k.bias"), Tensor::zeros(&[qk]), true)?;
        let wv = store.insert(&name("v.weight"), trunc_normal(&[d, v], rng), true)?;
        let bv = store.insert(&name("v.bias"), Tensor::zeros(&[v]), true)?;
        let wo = store.insert(&name("o.weight"), trunc_normal(&[v, config.out_dim], rng), true)?;
        let bo = store.insert(&name("o.bias"), Tensor::zeros(&[config.out_dim]), true)?;
        let rpe = match kind {
            AttentionKind::Mhsa => None,
            AttentionKind::Mhca => {
                let raw = softplus_inverse(T::one());
                let alpha_raw = store.insert(&name("rpe.alpha_raw"), Tensor::full(&[h, 1], raw), true)?;
                let centers = Tensor::from_fn(&[h, 2], |_| T::lit(rng.uniform_range(-2.0, 2.0)));
                let center = store.insert(&name("rpe.center"), centers, true)?;
                Some(RelPosParams { alpha_raw, center })
            }
        };
        let table = RelPosTable::new(config.grid, config.has_cls);
        Ok(Attention { config, kind, wq, bq, wk, bk, wv, bv, wo, bo, rpe, table })
    }

    pub fn table(&self) -> &RelPosTable<T> {
        &self.table
    }

    /// All parameter ids of this layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo];
        if let Some(r) = self.rpe {
            ids.extend([r.alpha_raw, r.center]);
        }
        ids
    }

    /// Current positive widths and centers of the heads.
    pub fn heads(&self, store: &ParamStore<T>) -> Option<HeadParams> {
        let r = self.rpe?;
        let alpha = store.value(r.alpha_raw).data().iter().map(|&a| crate::ops::elementwise::softplus(a).as_f64()).collect();
        let c = store.value(r.center).data();
        let centers = c.chunks(2).map(|p| (p[0].as_f64(), p[1].as_f64())).collect();
        Some((alpha, centers))
    }

    /// Position scores `[1, H, T, T]` on the tape.
    pub fn position_scores<'g>(&self, bound: &Bound<'g, T>) -> Result<Option<Var<'g, T>>> {
        let Some(r) = self.rpe else { return Ok(None) };
        let alpha = bound[r.alpha_raw].softplus();
        let graph = alpha.graph();
        let h = self.config.num_heads;
        let t = self.table.tokens();
        let ones = graph.constant(Tensor::ones(&[h, 1]));
        let coef = concat(&[ones, bound[r.center].scale(T::lit(-2.0))], 1)?;
        let v = coef.mul(alpha)?.neg();
        let enc = graph.constant(self.table.encodings.clone());
        Ok(Some(v.matmul(enc)?.reshape(&[1, h, t, t])?))
    }

    /// Forward pass over `x: [B, T, model_dim]`.
    ///
    /// `rng` selects training mode: when present, the position scores pass
    /// through dropout (one mask shared by the batch).
    pub fn forward<'g>(&self, bound: &Bound<'g, T>, x: Var<'g, T>, rng: Option<&mut RngStream>) -> Result<AttentionOutput<'g, T>> {
        let shape = x.shape();
        let cfg = &self.config;
        let t = self.table.tokens();
        if shape.len() != 3 || shape[1] != t || shape[2] != cfg.model_dim {
            return Err(Error::ShapeMismatch { op: "attention", lhs: shape, rhs: vec![0, t, cfg.model_dim] });
        }
        let (b, h) = (shape[0], cfg.num_heads);
        let heads = |w: ParamId, bias: ParamId, dh: usize| -> Result<Var<'g, T>> {
            x.matmul(bound[w])?.add(bound[bias])?.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3])
        };
        let q = heads(self.wq, self.bq, cfg.qk_head_dim)?;
        let k = heads(self.wk, self.bk, cfg.qk_head_dim)?;
        let v = heads(self.wv, self.bv, cfg.v_head_dim)?;
        let scale = T::lit(1.0 / (cfg.qk_head_dim as f64).sqrt());
        let mut scores = q.matmul(k.transpose_last()?)?.scale(scale);
        if let Some(p) = self.position_scores(bound)? {
            let p = match rng {
                Some(rng) => p.dropout(cfg.rpe_dropout_p, rng, true)?,
                None => p,
            };
            scores = scores.add(p)?;
        }
        let attn = scores.softmax(-1)?;
        let mixed = attn.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, h * cfg.v_head_dim])?;
        let output = mixed.matmul(bound[self.wo])?.add(bound[self.bo])?;
        Ok(AttentionOutput { output, attn })
    }
}

/// Builds an MHCA layer that reproduces a same-padded stride-1 convolution
/// on the interior of a `grid` image laid out as tokens.
///
/// `kernel` is `[C_out, C_in, K, K]`. The layer has `K^2` heads with zeroed
/// content projections (query/key width 1), identity value projections and
/// head `h = ky * K + kx` centered at offset `(ky - r, kx - r)`, `r = (K-1)/2`.
/// Head `h`'s block of the output projection is the kernel slice at that
/// offset, transposed.
pub fn express_conv<T: Element>(kernel: &Tensor<T>, bias: Option<&Tensor<T>>, alpha_large: f64, grid: (usize, usize)) -> Result<(ParamStore<T>, Attention<T>)> {
    let ks = kernel.shape();
    if ks.len() != 4 || ks[2] != ks[3] || ks[2].is_multiple_of(2) {
        return Err(Error::InvalidShape { op: "express_conv", shape: ks.to_vec(), reason: "expected [C_out, C_in, K, K] with odd K".into() });
    }
    let (c_out, c_in, kk) = (ks[0], ks[1], ks[2]);
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch { op: "express_conv", lhs: ks.to_vec(), rhs: b.shape().to_vec() });
        }
    }
    if alpha_large <= 0.0 {
        return Err(Error::Domain { op: "express_conv", detail: format!("alpha {alpha_large} must be positive") });
    }
    let heads = kk * kk;
    let config =
        AttentionConfig { model_dim: c_in, num_heads: heads, qk_head_dim: 1, v_head_dim: c_in, out_dim: c_out, rpe_dropout_p: 0.0, grid, has_cls: false };
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(0);
    let layer = Attention::new(&mut store, "conv", config, AttentionKind::Mhca, &mut rng)?;
    let r = (kk / 2) as isize;
    store.set_value(layer.wq, Tensor::zeros(&[c_in, heads]))?;
    store.set_value(layer.wk, Tensor::zeros(&[c_in, heads]))?;
    let mut wv = vec![T::zero(); c_in * heads * c_in];
    for h in 0..heads {
        for c in 0..c_in {
            wv[c * heads * c_in + h * c_in + c] = T::one();
        }
    }
    store.set_value(layer.wv, Tensor::from_parts(vec![c_in, heads * c_in], wv))?;
    let mut wo = vec![T::zero(); heads * c_in * c_out];
    for ky in 0..kk {
        for kx in 0..kk {
            let h = ky * kk + kx;
            for c in 0..c_in {
                for o in 0..c_out {
                    wo[(h * c_in + c) * c_out + o] = kernel.at(&[o, c, ky, kx]);
                }
            }
        }
    }
    store.set_value(layer.wo, Tensor::from_parts(vec![heads * c_in, c_out], wo))?;
    if let Some(b) = bias {
        store.set_value(layer.bo, b.clone())?;
    }
    let rpe = layer.rpe.expect("mhca layer");
    store.set_value(rpe.alpha_raw, Tensor::full(&[heads, 1], softplus_inverse(T::lit(alpha_large))))?;
    let centers = Tensor::from_fn(&[heads, 2], |i| {
        let (h, axis) = (i / 2, i % 2);
        let off = if axis == 0 { (h / kk) as isize - r } else { (h % kk) as isize - r };
        T::lit(off as f64)
    });
    store.set_value(rpe.center, centers)?;
    Ok((store, layer))
}

/// Image `[B, C, H, W]` to tokens `[B, H*W, C]` in row-major grid order.
pub fn image_to_tokens<'g, T: Element>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape { op: "image_to_tokens", shape: s, reason: "expected rank 4".into() });
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// Tokens `[B, rows*cols, C]` back to an image `[B, C, rows, cols]`.
pub fn tokens_to_image<'g, T: Element>(x: Var<'g, T>, grid: (usize, usize)) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(Error::InvalidShape { op: "tokens_to_image", shape: s, reason: format!("expected {} tokens", grid.0 * grid.1) });
    }
    x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], grid.0, grid.1])
}
