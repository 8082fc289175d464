//! Vision-transformer student: MHCA blocks followed by MHSA blocks.

use alloc::format;
use alloc::vec::Vec;

use super::layers::{patchify, LayerNorm, Linear};
use crate::attention::{Attention, AttentionConfig, AttentionKind, INIT_STD};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::ops::concat;
use crate::param::{Bound, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct StudentConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub dim: usize,
    pub n_mhca: usize,
    pub n_mhsa: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub rpe_dropout_p: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self::desk_ti()
    }
}

impl StudentConfig {
    /// 32x32 inputs, 4x4 patches, width 96, 4 MHCA + 2 MHSA blocks.
    pub fn desk_ti() -> Self {
        StudentConfig {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            dim: 96,
            n_mhca: 4,
            n_mhsa: 2,
            num_heads: 12,
            mlp_ratio: 4,
            num_classes: 10,
            rpe_dropout_p: 0.1,
        }
    }

    fn paper(dim: usize, heads: usize) -> Self {
        StudentConfig {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            dim,
            n_mhca: 8,
            n_mhsa: 4,
            num_heads: heads,
            mlp_ratio: 4,
            num_classes: 1000,
            rpe_dropout_p: 0.1,
        }
    }

    /// ImageNet-scale tiny variant (width 192, 12 heads).
    pub fn paper_ti() -> Self {
        Self::paper(192, 12)
    }

    /// ImageNet-scale small variant (width 384, 12 heads).
    pub fn paper_s() -> Self {
        Self::paper(384, 12)
    }

    /// ImageNet-scale base variant (width 768, 16 heads).
    pub fn paper_b() -> Self {
        Self::paper(768, 16)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk-ti" => Some(Self::desk_ti()),
            "paper-ti" => Some(Self::paper_ti()),
            "paper-s" => Some(Self::paper_s()),
            "paper-b" => Some(Self::paper_b()),
            _ => None,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Content tokens per image.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!("image size {} not divisible by patch size {}", self.image_size, self.patch_size)));
        }
        if self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.num_heads)));
        }
        if self.n_mhca + self.n_mhsa == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("student needs blocks, classes and a positive MLP ratio".into()));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let hidden = d * self.mlp_ratio;
        let patch = self.in_channels * self.patch_size * self.patch_size * d + d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d);
        let rpe = 3 * self.num_heads;
        let heads = 2 * (d * self.num_classes + self.num_classes);
        patch + d + (self.n_mhca + self.n_mhsa) * block + self.n_mhca * rpe + 2 * d + heads
    }
}

#[derive(Debug, Clone)]
struct Block<T> {
    norm1: LayerNorm,
    attn: Attention<T>,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl<T: Element> Block<T> {
    fn forward<'g>(&self, b: &Bound<'g, T>, x: Var<'g, T>, rng: Option<&mut RngStream>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let a = self.attn.forward(b, self.norm1.forward(b, x)?, rng)?;
        let x = x.add(a.output)?;
        let h = self.fc1.forward(b, self.norm2.forward(b, x)?)?.gelu();
        let x = x.add(self.fc2.forward(b, h)?)?;
        Ok((x, a.attn))
    }
}

/// Everything a student forward pass exposes.
pub struct StudentOutput<'g, T: Element> {
    pub cls_logits: Var<'g, T>,
    pub pooled_logits: Var<'g, T>,
    /// Content tokens `[B, l, d]` after each MHCA block.
    pub hidden: Vec<Var<'g, T>>,
    /// Attention maps `[B, H, T, T]` of every block.
    pub attn: Vec<Var<'g, T>>,
}

#[derive(Debug, Clone)]
pub struct StudentModel<T> {
    pub config: StudentConfig,
    pub params: ParamStore<T>,
    patch: Linear,
    cls: crate::param::ParamId,
    blocks: Vec<Block<T>>,
    norm: LayerNorm,
    cls_head: Linear,
    pooled_head: Linear,
}

/// Projects non-overlapping patches of `images: [B, C, H, W]` to
/// `[B, (H/P)(W/P), d]` with `embed: [C P P, d]` and `bias: [d]`.
pub fn patch_embed<'g, T: Element>(images: Var<'g, T>, patch: usize, embed: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
    patchify(images, patch)?.matmul(embed)?.add(bias)
}

impl<T: Element> StudentModel<T> {
    pub fn new(config: StudentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::derive(seed, 0x5700);
        let mut params = ParamStore::new();
        let d = config.dim;
        let patch_in = config.in_channels * config.patch_size * config.patch_size;
        let patch = Linear::new(&mut params, "patch_embed", patch_in, d, INIT_STD, &mut rng)?;
        let mut cls_init = Tensor::zeros(&[1, 1, d]);
        rng.fill_trunc_normal(cls_init.data_mut(), INIT_STD);
        let cls = params.insert("cls_token", cls_init, true)?;
        let grid = (config.grid(), config.grid());
        let mut blocks = Vec::with_capacity(config.n_mhca + config.n_mhsa);
        for i in 0..config.n_mhca + config.n_mhsa {
            let kind = if i < config.n_mhca { AttentionKind::Mhca } else { AttentionKind::Mhsa };
            let p = format!("blocks.{i}");
            let mut acfg = AttentionConfig::new(d, config.num_heads, grid, true)?;
            acfg.rpe_dropout_p = config.rpe_dropout_p;
            blocks.push(Block {
                norm1: LayerNorm::new(&mut params, &format!("{p}.norm1"), d)?,
                attn: Attention::new(&mut params, &format!("{p}.attn"), acfg, kind, &mut rng)?,
                norm2: LayerNorm::new(&mut params, &format!("{p}.norm2"), d)?,
                fc1: Linear::new(&mut params, &format!("{p}.mlp.fc1"), d, d * config.mlp_ratio, INIT_STD, &mut rng)?,
                fc2: Linear::new(&mut params, &format!("{p}.mlp.fc2"), d * config.mlp_ratio, d, INIT_STD, &mut rng)?,
            });
        }
        let norm = LayerNorm::new(&mut params, "norm", d)?;
        let cls_head = Linear::new(&mut params, "head_cls", d, config.num_classes, INIT_STD, &mut rng)?;
        let pooled_head = Linear::new(&mut params, "head_pooled", d, config.num_classes, INIT_STD, &mut rng)?;
        Ok(StudentModel { config, params, patch, cls, blocks, norm, cls_head, pooled_head })
    }

    pub fn attention_layers(&self) -> impl Iterator<Item = &Attention<T>> {
        self.blocks.iter().map(|b| &b.attn)
    }

    /// Freezes or unfreezes every relative-position parameter.
    pub fn set_rpe_trainable(&mut self, trainable: bool) {
        for block in &self.blocks {
            if let Some(r) = block.attn.rpe {
                self.params.set_trainable(r.alpha_raw, trainable);
                self.params.set_trainable(r.center, trainable);
            }
        }
    }

    /// Forward pass over `images: [B, C, H, W]`. Passing `rng` selects
    /// training mode (position-score dropout).
    pub fn forward<'g>(&self, b: &Bound<'g, T>, images: Var<'g, T>, mut rng: Option<&mut RngStream>) -> Result<StudentOutput<'g, T>> {
        let cfg = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::ShapeMismatch { op: "student_forward", lhs: s, rhs: alloc::vec![0, cfg.in_channels, cfg.image_size, cfg.image_size] });
        }
        let (batch, d, l) = (s[0], cfg.dim, cfg.patches());
        let tokens = patch_embed(images, cfg.patch_size, b[self.patch.weight], b[self.patch.bias])?;
        let cls = images.graph().constant(Tensor::zeros(&[batch, 1, d])).add(b[self.cls])?;
        let mut x = concat(&[cls, tokens], 1)?;
        let mut hidden = Vec::with_capacity(cfg.n_mhca);
        let mut attn = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, a) = block.forward(b, x, rng.as_deref_mut())?;
            x = next;
            attn.push(a);
            if i < cfg.n_mhca {
                hidden.push(x.slice(1, 1, l)?);
            }
        }
        let x = self.norm.forward(b, x)?;
        let cls_logits = self.cls_head.forward(b, x.slice(1, 0, 1)?.reshape(&[batch, d])?)?;
        let pooled_logits = self.pooled_head.forward(b, x.slice(1, 1, l)?.mean_axis(1, false)?)?;
        Ok(StudentOutput { cls_logits, pooled_logits, hidden, attn })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_store() {
        let cfg = StudentConfig { num_classes: 7, ..StudentConfig::desk_ti() };
        let m = StudentModel::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.params.trainable_count(), cfg.param_count());
    }

    #[test]
    fn presets_validate() {
        for name in ["desk-ti", "paper-ti", "paper-s", "paper-b"] {
            StudentConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(StudentConfig { image_size: 30, ..StudentConfig::desk_ti() }.validate().is_err());
    }
}
