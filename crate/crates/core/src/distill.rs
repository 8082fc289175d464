//! Aligners, distillation losses and the two-stage schedule.
//!
//! Stage I minimizes `alpha * CE(cls) + (1 - alpha) * CE(pooled, teacher
//! argmax) + beta * hidden`, where `hidden` is the mean over tap pairs of the
//! MSE between aligned student tokens and teacher feature maps. Stage II is
//! plain CE on the CLS head, or (anneal mode) the stage-I mix with `beta = 0`
//! and `alpha` rising linearly to 1 at the last epoch.

use alloc::format;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::models::layers::{LayerNorm, Linear};
use crate::models::{StudentOutput, TapSpec};
use crate::ops::{argmax_rows, Conv2dSpec};
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    /// Mix between CE on labels and pooled-logit distillation, in `[0, 1]`.
    pub alpha: f64,
    /// Weight of the hidden-state loss, `>= 0`.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("loss weights need alpha in [0, 1] and beta >= 0, got {self:?}")));
        }
        Ok(())
    }

    /// Whether the teacher contributes to the loss at all.
    pub fn needs_teacher(&self) -> bool {
        self.alpha < 1.0 || self.beta > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Stage2Mode {
    Pure,
    Anneal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct StageSchedule {
    pub total_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_mode: Stage2Mode,
    /// Keeps relative-position parameters fixed during stage II.
    pub freeze_rpe_in_stage2: bool,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule { total_epochs: 300, stage1_epochs: 250, stage2_mode: Stage2Mode::Pure, freeze_rpe_in_stage2: false }
    }
}

impl StageSchedule {
    pub fn desk_fast() -> Self {
        StageSchedule { total_epochs: 6, stage1_epochs: 5, ..Self::default() }
    }

    pub fn desk_full() -> Self {
        StageSchedule { total_epochs: 60, stage1_epochs: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage1_epochs > self.total_epochs {
            return Err(Error::Config(format!("schedule needs 0 < stage1_epochs <= total_epochs, got {}/{}", self.stage1_epochs, self.total_epochs)));
        }
        Ok(())
    }

    /// Anneal-mode `alpha` at a (possibly fractional) epoch in stage II:
    /// linear from `alpha1` at `E1` to 1 at `E`.
    pub fn anneal_alpha(&self, epoch: f64, alpha1: f64) -> f64 {
        let span = (self.total_epochs - self.stage1_epochs) as f64;
        if span == 0.0 {
            return 1.0;
        }
        let t = ((epoch - self.stage1_epochs as f64) / span).clamp(0.0, 1.0);
        alpha1 + (1.0 - alpha1) * t
    }

    /// Loss weights in effect at fractional epoch `epoch >= E1`.
    pub fn stage2_weights(&self, epoch: f64, stage1: LossWeights) -> LossWeights {
        match self.stage2_mode {
            Stage2Mode::Pure => LossWeights { alpha: 1.0, beta: 0.0 },
            Stage2Mode::Anneal => LossWeights { alpha: self.anneal_alpha(epoch, stage1.alpha), beta: 0.0 },
        }
    }
}

/// Stage and effective weights of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub stage: u8,
    pub weights: LossWeights,
}

pub fn schedule_at(epoch: usize, schedule: &StageSchedule, stage1: LossWeights) -> Result<ScheduleStep> {
    schedule.validate()?;
    if epoch >= schedule.total_epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{}", schedule.total_epochs)));
    }
    if epoch < schedule.stage1_epochs {
        Ok(ScheduleStep { stage: 1, weights: stage1 })
    } else {
        Ok(ScheduleStep { stage: 2, weights: schedule.stage2_weights(epoch as f64, stage1) })
    }
}

/// Maps one student hidden state `[B, l, d]` to a teacher tap `[B, h, w, c]`:
/// reshape to a `sqrt(l) x sqrt(l)` map, bilinear resize, depthwise 3x3
/// conv, LayerNorm over channels, ReLU, and a pointwise `d -> c` projection
/// when the widths differ.
#[derive(Debug, Clone)]
pub struct Aligner {
    pub dim: usize,
    pub target: (usize, usize, usize),
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub norm: LayerNorm,
    pub proj: Option<Linear>,
}

impl Aligner {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, dim: usize, target: (usize, usize, usize), rng: &mut RngStream) -> Result<Self> {
        let mut w = Tensor::zeros(&[dim, 1, 3, 3]);
        rng.fill_normal(w.data_mut(), (2.0f64 / 9.0).sqrt());
        let dw_weight = store.insert(&format!("{prefix}.dw.weight"), w, true)?;
        let dw_bias = store.insert(&format!("{prefix}.dw.bias"), Tensor::zeros(&[dim]), true)?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), dim)?;
        let proj = if dim != target.2 { Some(Linear::new(store, &format!("{prefix}.proj"), dim, target.2, 1.0 / (dim as f64).sqrt(), rng)?) } else { None };
        Ok(Aligner { dim, target, dw_weight, dw_bias, norm, proj })
    }

    pub fn forward<'g, T: Element>(&self, b: &Bound<'g, T>, hs: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = hs.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::ShapeMismatch { op: "aligner", lhs: s, rhs: alloc::vec![0, 0, self.dim] });
        }
        let (batch, l, d) = (s[0], s[1], s[2]);
        let side = l.isqrt();
        if side * side != l {
            return Err(Error::InvalidShape { op: "aligner", shape: s, reason: format!("{l} tokens do not form a square grid") });
        }
        let (h, w, _) = self.target;
        let map = hs.reshape(&[batch, side, side, d])?.permute(&[0, 3, 1, 2])?;
        let map = map.bilinear_resize(h, w)?;
        let map = map.conv2d(b[self.dw_weight], Some(b[self.dw_bias]), Conv2dSpec::same(3).with_groups(d))?;
        let mut x = self.norm.forward(b, map.permute(&[0, 2, 3, 1])?)?.relu();
        if let Some(p) = &self.proj {
            x = p.forward(b, x)?;
        }
        Ok(x)
    }
}

/// One aligner per tap pair, parameters kept apart from the student.
#[derive(Debug, Clone)]
pub struct Aligners<T> {
    pub taps: TapSpec,
    pub params: ParamStore<T>,
    pub layers: Vec<Aligner>,
}

impl<T: Element> Aligners<T> {
    /// `tap_shapes[k]` is the `(h, w, c)` of teacher stage `k + 1`.
    pub fn new(taps: TapSpec, dim: usize, n_mhca: usize, tap_shapes: &[(usize, usize, usize)], seed: u64) -> Result<Self> {
        taps.validate(tap_shapes.len(), n_mhca)?;
        let mut rng = RngStream::derive(seed, 0xa100);
        let mut params = ParamStore::new();
        let layers = taps
            .pairs
            .iter()
            .enumerate()
            .map(|(k, &(t, _))| Aligner::new(&mut params, &format!("aligner.{k}"), dim, tap_shapes[t - 1], &mut rng))
            .collect::<Result<_>>()?;
        Ok(Aligners { taps, params, layers })
    }

    /// Aligned student features, one per tap pair.
    pub fn forward<'g>(&self, b: &Bound<'g, T>, hidden: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        self.taps
            .pairs
            .iter()
            .zip(&self.layers)
            .map(|(&(_, s), a)| {
                let hs = hidden.get(s - 1).copied().ok_or_else(|| Error::Config(format!("student has no MHCA layer {s}")))?;
                a.forward(b, hs)
            })
            .collect()
    }

    /// Teacher stage outputs `[B, c, h, w]` selected by the tap spec and
    /// permuted to `[B, h, w, c]`, detached.
    pub fn teacher_targets<'g>(&self, taps: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        self.taps
            .pairs
            .iter()
            .map(|&(t, _)| {
                let tap = taps.get(t - 1).ok_or_else(|| Error::Config(format!("teacher has no stage {t}")))?;
                tap.detach().permute(&[0, 2, 3, 1])
            })
            .collect()
    }
}

/// Mean over tap pairs of the element-mean squared error.
pub fn hidden_loss<'g, T: Element>(aligned: &[Var<'g, T>], teacher: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    if aligned.is_empty() || aligned.len() != teacher.len() {
        return Err(Error::Config(format!("{} aligned features for {} teacher taps", aligned.len(), teacher.len())));
    }
    let mut total = aligned[0].mse(teacher[0])?;
    for (a, t) in aligned.iter().zip(teacher).skip(1) {
        total = total.add(a.mse(*t)?)?;
    }
    Ok(total.scale(T::lit(1.0 / aligned.len() as f64)))
}

/// Cross-entropy of the pooled logits against the teacher's argmax class.
pub fn logit_loss<'g, T: Element>(pooled: Var<'g, T>, teacher_logits: &Tensor<T>) -> Result<Var<'g, T>> {
    let ps = pooled.shape();
    if ps != teacher_logits.shape() {
        return Err(Error::ShapeMismatch { op: "logit_loss", lhs: ps, rhs: teacher_logits.shape().to_vec() });
    }
    pooled.cross_entropy(&argmax_rows(teacher_logits))
}

/// What the teacher provides to a distillation step.
pub struct TeacherSignal<'g, T: Element> {
    pub logits: Tensor<T>,
    /// Teacher features `[B, h, w, c]`, one per tap pair.
    pub taps: Vec<Var<'g, T>>,
}

/// Total loss plus the scalar values of its components (zero when a
/// component was not computed).
pub struct LossBreakdown<'g, T: Element> {
    pub total: Var<'g, T>,
    pub ce: f64,
    pub logit: f64,
    pub hidden: f64,
}

/// Stage-I objective. `aligned` holds the aligned student features and may
/// be empty when `beta = 0`; `teacher` may be `None` when the weights make
/// it irrelevant (`alpha = 1`, `beta = 0`).
pub fn stage1_loss<'g, T: Element>(
    student: &StudentOutput<'g, T>,
    aligned: &[Var<'g, T>],
    teacher: Option<&TeacherSignal<'g, T>>,
    labels: &[usize],
    weights: LossWeights,
) -> Result<LossBreakdown<'g, T>> {
    weights.validate()?;
    let ce = student.cls_logits.cross_entropy(labels)?;
    let mut total = ce.scale(T::lit(weights.alpha));
    let mut out_logit = 0.0;
    let mut out_hidden = 0.0;
    if weights.needs_teacher() {
        let teacher = teacher.ok_or_else(|| Error::Config("distillation weights need a teacher signal".into()))?;
        if weights.alpha < 1.0 {
            let l = logit_loss(student.pooled_logits, &teacher.logits)?;
            out_logit = l.item().as_f64();
            total = total.add(l.scale(T::lit(1.0 - weights.alpha)))?;
        }
        if weights.beta > 0.0 {
            let h = hidden_loss(aligned, &teacher.taps)?;
            out_hidden = h.item().as_f64();
            total = total.add(h.scale(T::lit(weights.beta)))?;
        }
    }
    Ok(LossBreakdown { total, ce: ce.item().as_f64(), logit: out_logit, hidden: out_hidden })
}

/// Stage-II objective at fractional epoch `epoch` in `[E1, E]`.
pub fn stage2_loss<'g, T: Element>(
    student: &StudentOutput<'g, T>,
    teacher: Option<&TeacherSignal<'g, T>>,
    labels: &[usize],
    epoch: f64,
    schedule: &StageSchedule,
    stage1: LossWeights,
) -> Result<LossBreakdown<'g, T>> {
    schedule.validate()?;
    if epoch < schedule.stage1_epochs as f64 || epoch > schedule.total_epochs as f64 {
        return Err(Error::Config(format!("stage II epoch {epoch} outside [{}, {}]", schedule.stage1_epochs, schedule.total_epochs)));
    }
    stage1_loss(student, &[], teacher, labels, schedule.stage2_weights(epoch, stage1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn schedule_boundaries() {
        let s = StageSchedule::desk_fast();
        let w = LossWeights::default();
        assert_eq!(schedule_at(0, &s, w).unwrap().stage, 1);
        assert_eq!(schedule_at(4, &s, w).unwrap().stage, 1);
        let last = schedule_at(5, &s, w).unwrap();
        assert_eq!((last.stage, last.weights), (2, LossWeights { alpha: 1.0, beta: 0.0 }));
        assert!(schedule_at(6, &s, w).is_err());
    }

    #[test]
    fn anneal_interpolates() {
        let s = StageSchedule { total_epochs: 300, stage1_epochs: 250, stage2_mode: Stage2Mode::Anneal, freeze_rpe_in_stage2: false };
        assert_eq!(s.anneal_alpha(250.0, 0.5), 0.5);
        assert_eq!(s.anneal_alpha(275.0, 0.5), 0.75);
        assert_eq!(s.anneal_alpha(300.0, 0.5), 1.0);
    }

    #[test]
    fn hidden_loss_examples() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        let t = g.constant(Tensor::from_f64(&[2], &[1.0, 3.0]).unwrap());
        assert_eq!(hidden_loss(&[a], &[t]).unwrap().item(), 5.0);
        let t2 = g.constant(Tensor::from_f64(&[2], &[2.0, 6.0]).unwrap());
        assert_eq!(hidden_loss(&[a], &[t2]).unwrap().item(), 20.0);
        assert_eq!(hidden_loss(&[t, t], &[t, t]).unwrap().item(), 0.0);
        assert!(hidden_loss(&[a], &[]).is_err());
    }

    #[test]
    fn logit_loss_ln2() {
        let g = Graph::<f64>::new();
        let s = g.input(Tensor::zeros(&[1, 2]));
        let t = Tensor::from_f64(&[1, 2], &[2.0, 1.0]).unwrap();
        assert!((logit_loss(s, &t).unwrap().item() - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights { alpha: 1.2, beta: 0.0 }.validate().is_err());
        assert!(LossWeights { alpha: 0.5, beta: -1.0 }.validate().is_err());
        assert!(!LossWeights { alpha: 1.0, beta: 0.0 }.needs_teacher());
    }
}
