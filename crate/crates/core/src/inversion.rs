//! Data-free image synthesis by inverting a BN-CNN teacher.
//!
//! Pixels are optimized with Adam under
//!
//! ```text
//! CE(teacher(x), y) + a_tv TV(x) + a_l2 |x|^2 + a_bn R_bn(x) + a_ep L_ep + a_tri L_triplet
//! ```
//!
//! where `R_bn` matches the batch statistics at every BN layer to the cached
//! running statistics and the last two terms act on the teacher's latent
//! features: `L_ep` pushes each image away from its nearest same-class
//! neighbour, the triplet term keeps the farthest same-class neighbour closer
//! than the nearest other-class image by a margin. The optimization runs at a
//! low resolution first; the result is upsampled bilinearly to seed the
//! high-resolution run.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::TeacherModel;
use crate::ops::{bilinear_resize_tensor, softmax_rows, BatchNormStats, BnMode};
use crate::optim::{cosine_lr, AdamConfig, AdamState};
use crate::param::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Isotropic total variation of `[B, C, H, W]`.
///
/// Sums `sqrt(dy^2 + dx^2)` over channels and over pixels with both forward
/// neighbours, divided by `B * H * W`. A zero gradient is used where both
/// differences vanish.
pub fn tv_reg<'g, T: Element>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let xv = x.value();
    let s = xv.shape().to_vec();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::InvalidShape { op: "tv_reg", shape: s, reason: "expected [B, C, H, W] with H, W >= 2".into() });
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let norm = T::lit(1.0 / (b * h * w) as f64);
    let d = xv.data();
    let mut total = T::zero();
    // Per-pixel magnitudes reused by the backward pass.
    let mut mags = vec![T::zero(); b * c * (h - 1) * (w - 1)];
    let mut k = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let p = base + i * w + j;
                let dy = d[p + w] - d[p];
                let dx = d[p + 1] - d[p];
                let m = (dy * dy + dx * dx).sqrt();
                mags[k] = m;
                total += m;
                k += 1;
            }
        }
    }
    let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
        let scale = g.item() * norm;
        let d = xv.data();
        let mut gx = vec![T::zero(); d.len()];
        let mut k = 0;
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..h - 1 {
                for j in 0..w - 1 {
                    let p = base + i * w + j;
                    let m = mags[k];
                    k += 1;
                    if m == T::zero() {
                        continue;
                    }
                    let dy = (d[p + w] - d[p]) / m * scale;
                    let dx = (d[p + 1] - d[p]) / m * scale;
                    gx[p + w] += dy;
                    gx[p + 1] += dx;
                    gx[p] -= dy + dx;
                }
            }
        }
        vec![Some(Tensor::from_parts(xv.shape().to_vec(), gx))]
    });
    Ok(x.graph().push_op(Tensor::scalar(total * norm), &[x], backward))
}

/// Mean squared pixel value.
pub fn l2_reg<'g, T: Element>(x: Var<'g, T>) -> Var<'g, T> {
    x.square().mean()
}

/// `sum_l |mu_l - mu_l^bn|_2 + |var_l - var_l^bn|_2` over all BN layers.
pub fn bn_reg<'g, T: Element>(batch: &[BatchNormStats<'g, T>], running: &[(Tensor<T>, Tensor<T>)]) -> Result<Var<'g, T>> {
    let first = batch.first().ok_or_else(|| Error::Config("bn_reg needs at least one BN layer".into()))?;
    if batch.len() != running.len() {
        return Err(Error::Config(format!("{} batch statistics for {} BN layers", batch.len(), running.len())));
    }
    let graph = first.mean.graph();
    let mut total = graph.scalar(T::zero());
    for (s, (rm, rv)) in batch.iter().zip(running) {
        let dm = s.mean.sub(graph.constant(rm.clone()))?.l2_norm();
        let dv = s.var.sub(graph.constant(rv.clone()))?.l2_norm();
        total = total.add(dm)?.add(dv)?;
    }
    Ok(total)
}

fn sq_dist(e: &[f64], f: usize, a: usize, b: usize) -> f64 {
    e[a * f..(a + 1) * f].iter().zip(&e[b * f..(b + 1) * f]).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_embeds<T: Element>(embeds: &Tensor<T>, labels: &[usize], anchor: usize) -> Result<(Vec<f64>, usize)> {
    let s = embeds.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch { op: "mining", lhs: s.to_vec(), rhs: vec![labels.len(), 0] });
    }
    if anchor >= labels.len() {
        return Err(Error::Selection { anchor, reason: "anchor index out of range" });
    }
    Ok((embeds.data().iter().map(|v| v.as_f64()).collect(), s[1]))
}

/// Best candidate by `better(new, best)`; ties keep the lowest index.
fn select<T: Element>(
    embeds: &Tensor<T>,
    labels: &[usize],
    anchor: usize,
    same_class: bool,
    better: fn(f64, f64) -> bool,
    what: &'static str,
) -> Result<usize> {
    let (e, f) = check_embeds(embeds, labels, anchor)?;
    let mut best: Option<(usize, f64)> = None;
    for j in 0..labels.len() {
        if j == anchor || (labels[j] == labels[anchor]) != same_class {
            continue;
        }
        let d = sq_dist(&e, f, anchor, j);
        if best.is_none_or(|(_, bd)| better(d, bd)) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j).ok_or(Error::Selection { anchor, reason: what })
}

/// Nearest other sample with the anchor's label.
pub fn select_easiest_positive<T: Element>(embeds: &Tensor<T>, labels: &[usize], anchor: usize) -> Result<usize> {
    select(embeds, labels, anchor, true, |d, best| d < best, "no positive candidate")
}

/// Farthest other sample with the anchor's label.
pub fn select_hardest_positive<T: Element>(embeds: &Tensor<T>, labels: &[usize], anchor: usize) -> Result<usize> {
    select(embeds, labels, anchor, true, |d, best| d > best, "no positive candidate")
}

/// Nearest sample with a different label.
pub fn select_hardest_negative<T: Element>(embeds: &Tensor<T>, labels: &[usize], anchor: usize) -> Result<usize> {
    select(embeds, labels, anchor, false, |d, best| d < best, "no negative candidate")
}

fn pair_distances<'g, T: Element>(embeds: Var<'g, T>, partners: &[usize]) -> Result<Var<'g, T>> {
    embeds.sub(embeds.index_select(partners)?).map(|d| d.l2_norm_rows())
}

/// Mean over anchors of `-|f(x_a) - f(x_ep(a))|`.
pub fn ep_loss<'g, T: Element>(embeds: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    let ev = embeds.value();
    let ep = (0..labels.len()).map(|a| select_easiest_positive(&ev, labels, a)).collect::<Result<Vec<_>>>()?;
    drop(ev);
    Ok(pair_distances(embeds, &ep)?.mean().neg())
}

/// Mean over anchors of `max(0, d(a, hardest positive) - d(a, hardest negative) + margin)`.
pub fn triplet_loss<'g, T: Element>(embeds: Var<'g, T>, labels: &[usize], margin: f64) -> Result<Var<'g, T>> {
    let ev = embeds.value();
    let n = labels.len();
    let hp = (0..n).map(|a| select_hardest_positive(&ev, labels, a)).collect::<Result<Vec<_>>>()?;
    let hn = (0..n).map(|a| select_hardest_negative(&ev, labels, a)).collect::<Result<Vec<_>>>()?;
    drop(ev);
    let dap = pair_distances(embeds, &hp)?;
    let dan = pair_distances(embeds, &hn)?;
    Ok(dap.sub(dan)?.add_scalar(T::lit(margin)).relu().mean())
}

/// `a_ep * ep_loss + a_triplet * triplet_loss`; zero-weighted terms are
/// skipped entirely.
pub fn intra_div_loss<'g, T: Element>(embeds: Var<'g, T>, labels: &[usize], weights: &InversionWeights) -> Result<Var<'g, T>> {
    let mut total = embeds.graph().scalar(T::zero());
    if weights.ep != 0.0 {
        total = total.add(ep_loss(embeds, labels)?.scale(T::lit(weights.ep)))?;
    }
    if weights.triplet != 0.0 {
        total = total.add(triplet_loss(embeds, labels, weights.margin)?.scale(T::lit(weights.triplet)))?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct InversionWeights {
    pub tv: f64,
    pub l2: f64,
    pub bn: f64,
    pub ep: f64,
    pub triplet: f64,
    pub margin: f64,
}

impl Default for InversionWeights {
    fn default() -> Self {
        InversionConfig::desk().weights
    }
}

impl InversionWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tv, self.l2, self.bn, self.ep, self.triplet, self.margin];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("inversion weights and margin must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// How the confidence filter reads the teacher output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ConfidenceScale {
    /// Softmax probability of the target class.
    Probability,
    /// Raw target-class logit.
    Logit,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct InversionConfig {
    pub weights: InversionWeights,
    pub batch_size: usize,
    pub classes_per_batch: usize,
    /// Iterations at the low and the high resolution.
    pub iterations: (usize, usize),
    pub resolutions: (usize, usize),
    pub learning_rates: (f64, f64),
    pub adam: AdamConfig,
    pub confidence_threshold: f64,
    pub confidence_scale: ConfidenceScale,
    /// Teacher stage (1-based) whose globally pooled output is the latent
    /// space; `None` selects the final pooled features.
    pub latent_stage: Option<usize>,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl InversionConfig {
    /// ImageNet-scale settings: 6 classes x 7 images, 2k + 2k iterations at
    /// 112 then 224 pixels.
    pub fn paper() -> Self {
        InversionConfig {
            weights: InversionWeights { tv: 1e-4, l2: 1e-5, bn: 5e-2, ep: 50.0, triplet: 0.5, margin: 1.0 },
            batch_size: 42,
            classes_per_batch: 6,
            iterations: (2000, 2000),
            resolutions: (112, 224),
            learning_rates: (0.5, 0.01),
            adam: AdamConfig::default(),
            confidence_threshold: 0.1,
            confidence_scale: ConfidenceScale::Probability,
            latent_stage: None,
            seed: 0,
        }
    }

    /// 3 classes x 4 images, 16 then 32 pixels.
    pub fn desk() -> Self {
        InversionConfig {
            weights: InversionWeights { tv: 1e-4, l2: 1e-5, bn: 5e-2, ep: 0.1, triplet: 0.5, margin: 1.0 },
            batch_size: 12,
            classes_per_batch: 3,
            iterations: (100, 100),
            resolutions: (16, 32),
            learning_rates: (0.1, 0.05),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.classes_per_batch == 0 || !self.batch_size.is_multiple_of(self.classes_per_batch) {
            return Err(Error::Config(format!("batch size {} is not divisible by {} classes", self.batch_size, self.classes_per_batch)));
        }
        if self.batch_size < 2 || self.resolutions.0 < 2 || self.resolutions.1 < 2 {
            return Err(Error::Config("inversion needs batch >= 2 and resolutions >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) && self.confidence_scale == ConfidenceScale::Probability {
            return Err(Error::Config(format!("confidence threshold {} outside [0, 1]", self.confidence_threshold)));
        }
        Ok(())
    }
}

/// Labels grouped as `classes[0]` repeated `per_class` times, then `classes[1]`, ...
pub fn grouped_labels(classes: &[usize], per_class: usize) -> Vec<usize> {
    classes.iter().flat_map(|&c| core::iter::repeat_n(c, per_class)).collect()
}

/// `k` distinct classes out of `num_classes`, sorted.
pub fn sample_classes(rng: &mut RngStream, num_classes: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..num_classes).collect();
    rng.shuffle(&mut all);
    all.truncate(k);
    all.sort_unstable();
    all
}

/// Scalar values of every objective term at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InversionTerms {
    pub ce: f64,
    pub tv: f64,
    pub l2: f64,
    pub bn: f64,
    pub ep: f64,
    pub triplet: f64,
    pub total: f64,
}

/// Losses recorded during [`synthesize_batch`].
#[derive(Debug, Clone, Default)]
pub struct InversionTrace {
    /// Terms at the initial pixels (low resolution).
    pub initial: InversionTerms,
    /// Terms at the returned pixels (high resolution).
    pub final_terms: InversionTerms,
    /// Terms before every optimizer step, both resolutions in order.
    pub history: Vec<InversionTerms>,
}

/// One optimized batch.
#[derive(Debug, Clone)]
pub struct SynthBatch<T> {
    /// `[B, C, H, W]` at the high resolution.
    pub pixels: Tensor<T>,
    pub labels: Vec<usize>,
    /// Latent features of the final pixels `[B, F]`.
    pub embeds: Tensor<T>,
    /// Teacher logits of the final pixels `[B, classes]`.
    pub logits: Tensor<T>,
    pub trace: InversionTrace,
}

fn global_pool<'g, T: Element>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2, false)
}

struct Objective<'g, T: Element> {
    total: Var<'g, T>,
    terms: InversionTerms,
    embeds: Var<'g, T>,
    logits: Var<'g, T>,
}

/// The full inversion objective at pixels `x`.
pub fn inversion_objective<'g, T: Element>(
    teacher: &TeacherModel<T>,
    running: &[(Tensor<T>, Tensor<T>)],
    x: Var<'g, T>,
    labels: &[usize],
    config: &InversionConfig,
) -> Result<(Var<'g, T>, InversionTerms)> {
    let o = objective(teacher, running, x, labels, config)?;
    Ok((o.total, o.terms))
}

fn objective<'g, T: Element>(
    teacher: &TeacherModel<T>,
    running: &[(Tensor<T>, Tensor<T>)],
    x: Var<'g, T>,
    labels: &[usize],
    config: &InversionConfig,
) -> Result<Objective<'g, T>> {
    let graph = x.graph();
    let tb = teacher.params.bind_frozen(graph);
    let out = teacher.forward(&tb, x, BnMode::Invert)?;
    let w = &config.weights;
    let embeds = match config.latent_stage {
        None => out.features,
        Some(k) => global_pool(*out.taps.get(k.wrapping_sub(1)).ok_or_else(|| Error::Config(format!("teacher has no stage {k}")))?)?,
    };
    let ce = out.logits.cross_entropy(labels)?;
    let tv = tv_reg(x)?;
    let l2 = l2_reg(x);
    let bn = bn_reg(&out.bn_stats, running)?;
    let mut terms = InversionTerms { ce: ce.item().as_f64(), tv: tv.item().as_f64(), l2: l2.item().as_f64(), bn: bn.item().as_f64(), ..Default::default() };
    let mut total = ce.add(tv.scale(T::lit(w.tv)))?.add(l2.scale(T::lit(w.l2)))?.add(bn.scale(T::lit(w.bn)))?;
    if w.ep != 0.0 {
        let ep = ep_loss(embeds, labels)?;
        terms.ep = ep.item().as_f64();
        total = total.add(ep.scale(T::lit(w.ep)))?;
    }
    if w.triplet != 0.0 {
        let tr = triplet_loss(embeds, labels, w.margin)?;
        terms.triplet = tr.item().as_f64();
        total = total.add(tr.scale(T::lit(w.triplet)))?;
    }
    terms.total = total.item().as_f64();
    let named = [("ce", terms.ce), ("tv", terms.tv), ("l2", terms.l2), ("bn", terms.bn), ("ep", terms.ep), ("triplet", terms.triplet)];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { term: name, iteration: 0 });
    }
    Ok(Objective { total, terms, embeds, logits: out.logits })
}

/// Optimizes one batch of images for `labels` against `teacher`.
///
/// `batch_index` selects the random stream used for the pixel init, so
/// batches are independent and reproducible.
pub fn synthesize_batch<T: Element>(teacher: &TeacherModel<T>, labels: &[usize], config: &InversionConfig, batch_index: u64) -> Result<SynthBatch<T>> {
    config.validate()?;
    if labels.len() != config.batch_size {
        return Err(Error::Config(format!("{} labels for batch size {}", labels.len(), config.batch_size)));
    }
    let running = teacher.running_stats();
    let mut rng = RngStream::derive(config.seed, 0x1000 + batch_index);
    let (lo, hi) = config.resolutions;
    let channels = teacher.config.in_channels;
    let mut init = Tensor::zeros(&[labels.len(), channels, lo, lo]);
    rng.fill_normal(init.data_mut(), 1.0);

    let mut trace = InversionTrace::default();
    let mut pixels = init;
    let stages = [(lo, config.iterations.0, config.learning_rates.0), (hi, config.iterations.1, config.learning_rates.1)];
    for (stage, &(res, iters, lr)) in stages.iter().enumerate() {
        if stage > 0 && res != pixels.shape()[2] {
            pixels = bilinear_resize_tensor(&pixels, res, res)?;
        }
        let mut store = ParamStore::new();
        let id = store.insert("pixels", pixels, true)?;
        let mut adam = AdamState::new(config.adam);
        for it in 0..iters {
            let g = Graph::new();
            let b = store.bind(&g);
            let o = objective(teacher, &running, b[id], labels, config).map_err(|e| tag_iteration(e, trace.history.len()))?;
            if trace.history.is_empty() {
                trace.initial = o.terms;
            }
            trace.history.push(o.terms);
            let grads = g.backward(o.total)?;
            store.accumulate(&b, &grads);
            drop(b);
            adam.step(&mut store, cosine_lr(it, iters, lr, 0.0))?;
        }
        pixels = store.value(id).clone();
    }
    let g = Graph::new();
    let x = g.constant(pixels.clone());
    let o = objective(teacher, &running, x, labels, config).map_err(|e| tag_iteration(e, trace.history.len()))?;
    if trace.history.is_empty() {
        trace.initial = o.terms;
    }
    trace.final_terms = o.terms;
    let embeds = (*o.embeds.value()).clone();
    let logits = (*o.logits.value()).clone();
    Ok(SynthBatch { pixels, labels: labels.to_vec(), embeds, logits, trace })
}

fn tag_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { term, iteration },
        other => other,
    }
}

/// Target-class confidence of each row of `logits`.
pub fn target_confidence<T: Element>(logits: &Tensor<T>, labels: &[usize], scale: ConfidenceScale) -> Vec<f64> {
    let classes = logits.shape()[1];
    let values = match scale {
        ConfidenceScale::Probability => softmax_rows(logits),
        ConfidenceScale::Logit => logits.clone(),
    };
    labels.iter().enumerate().map(|(i, &y)| values.data()[i * classes + y].as_f64()).collect()
}

/// Indices whose target confidence reaches `threshold`, with all
/// confidences for the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub kept: Vec<usize>,
    pub confidence: Vec<f64>,
}

/// Keeps images whose teacher confidence in their target class is at least
/// `threshold`. The teacher runs in eval mode.
pub fn filter_confident<T: Element>(
    teacher: &TeacherModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
    threshold: f64,
    scale: ConfidenceScale,
) -> Result<FilterResult> {
    let g = Graph::new();
    let b = teacher.params.bind_frozen(&g);
    let logits = teacher.forward(&b, g.constant(images.clone()), BnMode::Eval)?.logits.value();
    Ok(filter_logits(&logits, labels, threshold, scale))
}

/// [`filter_confident`] on precomputed logits.
pub fn filter_logits<T: Element>(logits: &Tensor<T>, labels: &[usize], threshold: f64, scale: ConfidenceScale) -> FilterResult {
    let confidence = target_confidence(logits, labels, scale);
    let kept = confidence.iter().enumerate().filter(|(_, &c)| c >= threshold).map(|(i, _)| i).collect();
    FilterResult { kept, confidence }
}
