//! Small residual BN-CNN teacher.
//!
//! Stem: 3x3 conv, BN, ReLU. Each stage stacks residual blocks of two 3x3
//! conv-BN layers; the first block of every stage after the first halves the
//! resolution and uses a 1x1 conv-BN projection shortcut. A global average
//! pool yields the latent features consumed by the linear head.

use alloc::format;
use alloc::vec::Vec;

use super::layers::{BatchNorm2d, Conv2d, Linear};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::ops::{update_running, BatchNormStats, BnMode};
use crate::param::{Bound, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TeacherConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self::desk_teacher()
    }
}

impl TeacherConfig {
    /// Three stages of two blocks, widths 32/64/128, for 32x32 inputs.
    pub fn desk_teacher() -> Self {
        TeacherConfig { image_size: 32, in_channels: 3, widths: alloc::vec![32, 64, 128], blocks_per_stage: 2, num_classes: 10 }
    }

    /// `(h, w, c)` of every stage output.
    pub fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut size = self.image_size;
        self.widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if i > 0 {
                    size = size.div_ceil(2);
                }
                (size, size, c)
            })
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

/// Outputs of one teacher forward pass.
pub struct TeacherOutput<'g, T: Element> {
    pub logits: Var<'g, T>,
    /// Stage outputs `[B, c, h, w]`.
    pub taps: Vec<Var<'g, T>>,
    /// Global-pooled penultimate features `[B, F]`.
    pub features: Var<'g, T>,
    /// Batch statistics of every BN layer in forward order; empty in eval.
    pub bn_stats: Vec<BatchNormStats<'g, T>>,
    /// Inputs of every BN layer in forward order.
    pub bn_inputs: Vec<Var<'g, T>>,
}

impl<'g, T: Element> TeacherOutput<'g, T> {
    /// Detached copies of the batch statistics.
    pub fn stat_values(&self) -> Vec<(Tensor<T>, Tensor<T>)> {
        self.bn_stats.iter().map(|s| ((*s.mean.value()).clone(), (*s.var.value()).clone())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TeacherModel<T> {
    pub config: TeacherConfig,
    pub params: ParamStore<T>,
    stem: ConvBn,
    stages: Vec<Vec<ResBlock>>,
    head: Linear,
}

struct Ctx<'a, 'g, T: Element> {
    b: &'a Bound<'g, T>,
    mode: BnMode,
    stats: Vec<BatchNormStats<'g, T>>,
    inputs: Vec<Var<'g, T>>,
}

impl<'a, 'g, T: Element> Ctx<'a, 'g, T> {
    fn conv_bn(&mut self, layer: &ConvBn, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = layer.conv.forward(self.b, x)?;
        self.inputs.push(y);
        let out = layer.bn.forward(self.b, y, self.mode)?;
        self.stats.extend(out.stats);
        Ok(out.output)
    }
}

impl<T: Element> TeacherModel<T> {
    pub fn new(config: TeacherConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.blocks_per_stage == 0 || config.num_classes == 0 {
            return Err(Error::Config("teacher needs at least one stage, one block and one class".into()));
        }
        let mut rng = RngStream::derive(seed, 0x7e00);
        let mut params = ParamStore::new();
        let mut conv_bn = |params: &mut ParamStore<T>, name: &str, inp: usize, out: usize, k: usize, stride: usize| -> Result<ConvBn> {
            Ok(ConvBn {
                conv: Conv2d::new(params, &format!("{name}.conv"), inp, out, k, stride, &mut rng)?,
                bn: BatchNorm2d::new(params, &format!("{name}.bn"), out)?,
            })
        };
        let stem = conv_bn(&mut params, "stem", config.in_channels, config.widths[0], 3, 1)?;
        let mut stages = Vec::new();
        let mut inp = config.widths[0];
        for (s, &w) in config.widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for k in 0..config.blocks_per_stage {
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                let p = format!("stages.{s}.{k}");
                let shortcut = if stride != 1 || inp != w { Some(conv_bn(&mut params, &format!("{p}.shortcut"), inp, w, 1, stride)?) } else { None };
                blocks.push(ResBlock {
                    a: conv_bn(&mut params, &format!("{p}.a"), inp, w, 3, stride)?,
                    b: conv_bn(&mut params, &format!("{p}.b"), w, w, 3, 1)?,
                    shortcut,
                });
                inp = w;
            }
            stages.push(blocks);
        }
        let head_std = 1.0 / (inp as f64).sqrt();
        let head = Linear::new(&mut params, "head", inp, config.num_classes, head_std, &mut rng)?;
        Ok(TeacherModel { config, params, stem, stages, head })
    }

    /// Every BN layer in forward order.
    pub fn bn_layers(&self) -> Vec<BatchNorm2d> {
        let mut out = alloc::vec![self.stem.bn];
        for block in self.stages.iter().flatten() {
            out.push(block.a.bn);
            out.push(block.b.bn);
            if let Some(s) = &block.shortcut {
                out.push(s.bn);
            }
        }
        out
    }

    /// Running `(mean, var)` of every BN layer in forward order.
    pub fn running_stats(&self) -> Vec<(Tensor<T>, Tensor<T>)> {
        self.bn_layers().iter().map(|bn| (self.params.value(bn.running_mean).clone(), self.params.value(bn.running_var).clone())).collect()
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit_running_stats(&mut self, stats: &[(Tensor<T>, Tensor<T>)]) -> Result<()> {
        let layers = self.bn_layers();
        if layers.len() != stats.len() {
            return Err(Error::Config(format!("{} BN layers but {} statistics", layers.len(), stats.len())));
        }
        for (bn, (mean, var)) in layers.iter().zip(stats) {
            update_running(self.params.value_mut(bn.running_mean), mean);
            update_running(self.params.value_mut(bn.running_var), var);
        }
        Ok(())
    }

    /// Forward pass over `images: [B, C, H, W]`.
    pub fn forward<'g>(&self, b: &Bound<'g, T>, images: Var<'g, T>, mode: BnMode) -> Result<TeacherOutput<'g, T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch { op: "teacher_forward", lhs: s, rhs: alloc::vec![0, self.config.in_channels, 0, 0] });
        }
        let mut ctx = Ctx { b, mode, stats: Vec::new(), inputs: Vec::new() };
        let mut x = ctx.conv_bn(&self.stem, images)?.relu();
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                let h = ctx.conv_bn(&block.a, x)?.relu();
                let h = ctx.conv_bn(&block.b, h)?;
                let skip = match &block.shortcut {
                    Some(sc) => ctx.conv_bn(sc, x)?,
                    None => x,
                };
                x = h.add(skip)?.relu();
            }
            taps.push(x);
        }
        let xs = x.shape();
        let features = x.reshape(&[xs[0], xs[1], xs[2] * xs[3]])?.mean_axis(2, false)?;
        let logits = self.head.forward(b, features)?;
        Ok(TeacherOutput { logits, taps, features, bn_stats: ctx.stats, bn_inputs: ctx.inputs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn bn_layer_count() {
        let t = TeacherModel::<f32>::new(TeacherConfig::desk_teacher(), 0).unwrap();
        // stem + 6 blocks x 2 + 2 projection shortcuts
        assert_eq!(t.bn_layers().len(), 15);
    }

    #[test]
    fn eval_has_no_stats_and_invert_rejects_single_image() {
        let cfg = TeacherConfig { image_size: 8, widths: alloc::vec![4, 8], blocks_per_stage: 1, ..TeacherConfig::desk_teacher() };
        let t = TeacherModel::<f64>::new(cfg, 1).unwrap();
        let g = Graph::new();
        let b = t.params.bind_frozen(&g);
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(t.forward(&b, x, BnMode::Eval).unwrap().bn_stats.is_empty());
        assert!(matches!(t.forward(&b, x, BnMode::Invert), Err(Error::BatchTooSmall { .. })));
    }
}
