//! Finite-difference checks of every differentiable primitive and of the
//! composed training and inversion objectives.
//!
//! Each case draws a fresh random instance (shapes included) per seed and
//! compares tape gradients against central differences through a random
//! projection of the output. Linear and bilinear maps are checked at a large
//! step where central differences are exact up to rounding; smooth nonlinear
//! maps use a small step.

use alloc::vec;
use alloc::vec::Vec;

use super::{grad_check, projection, GradCheckReport};
use crate::attention::{Attention, AttentionConfig, AttentionKind};
use crate::distill::{stage1_loss, Aligners, LossWeights, TeacherSignal};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::inversion::{inversion_objective, tv_reg, InversionConfig, InversionWeights};
use crate::models::{layers::patchify, StudentConfig, StudentModel, TapSpec, TeacherConfig, TeacherModel};
use crate::ops::{batch_norm, concat, BnMode, Conv2dSpec};
use crate::param::{Bound, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Tolerance for linear and bilinear primitives.
pub const LINEAR_TOL: f64 = 1e-10;
/// Tolerance for smooth nonlinear primitives and the stage-I loss.
pub const SMOOTH_TOL: f64 = 1e-5;
/// Tolerance for the full inversion objective.
pub const INVERSION_TOL: f64 = 1e-4;

// Central differences are exact for maps at most quadratic in each coordinate.
const LINEAR_EPS: f64 = 0.5;
const SMOOTH_EPS: f64 = 1e-5;

/// Worst result of one case over all its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    pub refined: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

type Runner = fn(&mut RngStream) -> Result<GradCheckReport>;

struct Case {
    name: &'static str,
    tolerance: f64,
    run: Runner,
}

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Normal entries pushed at least `gap` away from zero.
fn randn_away(rng: &mut RngStream, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.normal();
        v + gap * v.signum()
    })
}

fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn check_unary(rng: &mut RngStream, x: Tensor<f64>, eps: f64, op: for<'g> fn(Var<'g, f64>) -> Result<Var<'g, f64>>) -> Result<GradCheckReport> {
    let seed = rng.next_u64();
    grad_check(move |g, v| projection(g, op(v[0])?, seed), &[x], eps)
}

fn check_binary(
    rng: &mut RngStream,
    a: Tensor<f64>,
    b: Tensor<f64>,
    eps: f64,
    op: for<'g> fn(Var<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
) -> Result<GradCheckReport> {
    let seed = rng.next_u64();
    grad_check(move |g, v| projection(g, op(v[0], v[1])?, seed), &[a, b], eps)
}

fn shape_nd(rng: &mut RngStream) -> Vec<usize> {
    let rank = dim(rng, 1, 3);
    (0..rank).map(|_| dim(rng, 1, 4)).collect()
}

fn case_add(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    // Broadcast the second operand over the leading axis.
    let b_shape = s[1..].to_vec();
    let b = if b_shape.is_empty() { randn(rng, &[1]) } else { randn(rng, &b_shape) };
    let a = randn(rng, &s);
    check_binary(rng, a, b, LINEAR_EPS, |a, b| a.add(b))
}

fn case_sub(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let (a, b) = (randn(rng, &s), randn(rng, &s));
    check_binary(rng, a, b, LINEAR_EPS, |a, b| a.sub(b))
}

fn case_mul(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let (a, b) = (randn(rng, &s), randn(rng, &[*s.last().unwrap()]));
    check_binary(rng, a, b, LINEAR_EPS, |a, b| a.mul(b))
}

fn case_div(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let (a, b) = (randn(rng, &s), randn_away(rng, &s, 0.5));
    check_binary(rng, a, b, SMOOTH_EPS, |a, b| a.div(b))
}

fn case_scalar_ops(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let x = randn(rng, &s);
    check_unary(rng, x, LINEAR_EPS, |x| Ok(x.scale(-1.7).add_scalar(0.3).neg()))
}

fn case_square(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let x = randn(rng, &s);
    check_unary(rng, x, LINEAR_EPS, |x| Ok(x.square()))
}

fn case_relu(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let x = randn_away(rng, &s, 0.1);
    check_unary(rng, x, 0.05, |x| Ok(x.relu()))
}

fn case_gelu(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let x = randn(rng, &s);
    check_unary(rng, x, SMOOTH_EPS, |x| Ok(x.gelu()))
}

fn case_exp(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let x = randn(rng, &s);
    check_unary(rng, x, SMOOTH_EPS, |x| Ok(x.exp()))
}

fn case_softplus(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let x = randn(rng, &s).map(|v| 3.0 * v);
    check_unary(rng, x, SMOOTH_EPS, |x| Ok(x.softplus()))
}

fn case_sqrt(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let x = randn(rng, &s).map(|v| v.abs() + 0.5);
    check_unary(rng, x, SMOOTH_EPS, |x| x.sqrt())
}

fn case_log(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let x = randn(rng, &s).map(|v| v.abs() + 0.5);
    check_unary(rng, x, SMOOTH_EPS, |x| x.log())
}

fn case_reductions(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = vec![dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = randn(rng, &s);
    let seed = rng.next_u64();
    grad_check(
        move |g, v| {
            let a = v[0].sum().scale(0.5);
            let b = v[0].mean();
            let c = projection(g, v[0].sum_axis(1, true)?, seed)?;
            let d = projection(g, v[0].mean_axis(-1, false)?, seed + 1)?;
            a.add(b)?.add(c)?.add(d)
        },
        &[x],
        LINEAR_EPS,
    )
}

fn case_l2_norm(rng: &mut RngStream) -> Result<GradCheckReport> {
    let rows = dim(rng, 1, 5);
    let cols = dim(rng, 1, 6);
    let x = randn(rng, &[rows, cols]);
    let seed = rng.next_u64();
    grad_check(move |g, v| projection(g, v[0].l2_norm_rows(), seed)?.add(v[0].l2_norm()), &[x], SMOOTH_EPS)
}

fn case_shape_ops(rng: &mut RngStream) -> Result<GradCheckReport> {
    let (a, b, c) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 3));
    let x = randn(rng, &[a, b, c]);
    let y = randn(rng, &[a, 2, c]);
    let idx: Vec<usize> = (0..dim(rng, 1, 5)).map(|_| rng.below(a)).collect();
    let start = rng.below(b - 1);
    let seed = rng.next_u64();
    grad_check(
        move |g, v| {
            let p = v[0].permute(&[2, 0, 1])?.reshape(&[c * a, b])?;
            let t = v[0].transpose_last()?;
            let s = v[0].slice(1, start, 1)?;
            let cat = concat(&[v[0], v[1]], 1)?;
            let sel = v[0].index_select(&idx)?;
            projection(g, p, seed)?.add(projection(g, t, seed + 1)?)?.add(projection(g, s, seed + 2)?)?.add(projection(g, cat, seed + 3)?)?.add(projection(
                g,
                sel,
                seed + 4,
            )?)
        },
        &[x, y],
        LINEAR_EPS,
    )
}

fn case_matmul(rng: &mut RngStream) -> Result<GradCheckReport> {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let batch = dim(rng, 1, 3);
    let a = randn(rng, &[batch, m, k]);
    let b = randn(rng, &[k, n]);
    check_binary(rng, a, b, LINEAR_EPS, |a, b| a.matmul(b))
}

fn case_softmax(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = vec![dim(rng, 1, 3), dim(rng, 2, 5)];
    let x = randn(rng, &s).map(|v| 2.0 * v);
    let axis = rng.below(2) as isize;
    let seed = rng.next_u64();
    grad_check(move |g, v| projection(g, v[0].softmax(axis)?, seed), &[x], SMOOTH_EPS)
}

fn case_layer_norm(rng: &mut RngStream) -> Result<GradCheckReport> {
    let w = dim(rng, 2, 6);
    let rows = dim(rng, 1, 4);
    let x = randn(rng, &[rows, w]);
    let (gain, bias) = (randn(rng, &[w]), randn(rng, &[w]));
    let seed = rng.next_u64();
    grad_check(move |g, v| projection(g, v[0].layer_norm(v[1], v[2], 1e-5)?, seed), &[x, gain, bias], SMOOTH_EPS)
}

fn bn_case(rng: &mut RngStream, mode: BnMode) -> Result<GradCheckReport> {
    let (b, c) = (dim(rng, 2, 4), dim(rng, 1, 3));
    let (h, w) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let x = randn(rng, &[b, c, h, w]).map(|v| 1.5 * v + 0.3);
    let gamma = randn(rng, &[c]);
    let beta = randn(rng, &[c]);
    let rm = randn(rng, &[c]);
    let rv = randn(rng, &[c]).map(|v| v.abs() + 0.5);
    let seed = rng.next_u64();
    grad_check(
        move |g, v| {
            let out = batch_norm(v[0], v[1], v[2], g.constant(rm.clone()), g.constant(rv.clone()), 1e-5, mode)?;
            let mut total = projection(g, out.output, seed)?;
            if let Some(stats) = out.stats {
                total = total.add(projection(g, stats.mean, seed + 1)?)?.add(projection(g, stats.var, seed + 2)?)?;
            }
            Ok(total)
        },
        &[x, gamma, beta],
        SMOOTH_EPS,
    )
}

fn case_batch_norm_train(rng: &mut RngStream) -> Result<GradCheckReport> {
    bn_case(rng, BnMode::Train)
}

fn case_batch_norm_invert(rng: &mut RngStream) -> Result<GradCheckReport> {
    bn_case(rng, BnMode::Invert)
}

fn case_conv2d(rng: &mut RngStream) -> Result<GradCheckReport> {
    let groups = dim(rng, 1, 2);
    let (cin, cout) = (groups * dim(rng, 1, 2), groups * dim(rng, 1, 2));
    let k = [1, 3][rng.below(2)];
    let stride = dim(rng, 1, 2);
    let (h, w) = (dim(rng, 3, 5), dim(rng, 3, 5));
    let batch = dim(rng, 1, 2);
    let x = randn(rng, &[batch, cin, h, w]);
    let wt = randn(rng, &[cout, cin / groups, k, k]);
    let bias = randn(rng, &[cout]);
    let spec = Conv2dSpec::same(k).with_stride(stride).with_groups(groups);
    let seed = rng.next_u64();
    grad_check(move |g, v| projection(g, v[0].conv2d(v[1], Some(v[2]), spec)?, seed), &[x, wt, bias], LINEAR_EPS)
}

fn case_bilinear(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = [1, dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = randn(rng, &s);
    let (oh, ow) = (dim(rng, 1, 6), dim(rng, 1, 6));
    let seed = rng.next_u64();
    grad_check(move |g, v| projection(g, v[0].bilinear_resize(oh, ow)?, seed), &[x], LINEAR_EPS)
}

fn case_dropout(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let x = randn(rng, &s);
    let (seed, mask_seed) = (rng.next_u64(), rng.next_u64());
    grad_check(
        move |g, v| {
            let mut r = RngStream::new(mask_seed);
            projection(g, v[0].dropout(0.3, &mut r, true)?, seed)
        },
        &[x],
        LINEAR_EPS,
    )
}

fn case_cross_entropy(rng: &mut RngStream) -> Result<GradCheckReport> {
    let (b, c) = (dim(rng, 1, 4), dim(rng, 2, 5));
    let x = randn(rng, &[b, c]).map(|v| 2.0 * v);
    let t: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
    grad_check(move |_, v| v[0].cross_entropy(&t), &[x], SMOOTH_EPS)
}

fn case_mse(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = shape_nd(rng);
    let (a, b) = (randn(rng, &s), randn(rng, &s));
    grad_check(|_, v| v[0].mse(v[1]), &[a, b], LINEAR_EPS)
}

fn case_patchify(rng: &mut RngStream) -> Result<GradCheckReport> {
    let p = dim(rng, 1, 2);
    let s = [dim(rng, 1, 2), dim(rng, 1, 3), 2 * p, 2 * p];
    let x = randn(rng, &s);
    let seed = rng.next_u64();
    grad_check(move |g, v| projection(g, patchify(v[0], p)?, seed), &[x], LINEAR_EPS)
}

fn case_tv(rng: &mut RngStream) -> Result<GradCheckReport> {
    let s = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5)];
    let x = randn(rng, &s);
    grad_check(|_, v| tv_reg(v[0]), &[x], SMOOTH_EPS)
}

/// Checks `f(x, params)` with respect to `x` and every parameter.
fn check_with_params(
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    eps: f64,
    f: impl for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
) -> Result<GradCheckReport> {
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, p)| (*p.value).clone()));
    grad_check(
        |g, v| {
            let b = Bound::from_vars(store, v[1..].to_vec())?;
            f(g, &b, v[0])
        },
        &inputs,
        eps,
    )
}

fn attention_case(rng: &mut RngStream, kind: AttentionKind) -> Result<GradCheckReport> {
    let grid = (dim(rng, 1, 3), dim(rng, 1, 3));
    let has_cls = rng.below(2) == 1;
    let heads = dim(rng, 1, 2);
    let mut cfg = AttentionConfig::new(2 * heads, heads, grid, has_cls)?;
    cfg.rpe_dropout_p = 0.2;
    let mut store = ParamStore::new();
    let mut init = RngStream::new(rng.next_u64());
    let layer = Attention::new(&mut store, "attn", cfg.clone(), kind, &mut init)?;
    // Spread the weights so the softmax is far from uniform.
    for (id, _) in store.iter().map(|(id, p)| (id, p.value.numel())).collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, randn(rng, &shape))?;
    }
    let batch = dim(rng, 1, 2);
    let x = randn(rng, &[batch, cfg.tokens(), cfg.model_dim]);
    let (seed, drop_seed) = (rng.next_u64(), rng.next_u64());
    check_with_params(&store, x, SMOOTH_EPS, move |g, b, x| {
        let mut r = RngStream::new(drop_seed);
        let out = layer.forward(b, x, Some(&mut r))?;
        projection(g, out.output, seed)?.add(projection(g, out.attn, seed + 1)?)
    })
}

fn case_mhsa(rng: &mut RngStream) -> Result<GradCheckReport> {
    attention_case(rng, AttentionKind::Mhsa)
}

fn case_mhca(rng: &mut RngStream) -> Result<GradCheckReport> {
    attention_case(rng, AttentionKind::Mhca)
}

fn tiny_student(seed: u64) -> Result<StudentModel<f64>> {
    let cfg = StudentConfig {
        image_size: 8,
        patch_size: 2,
        in_channels: 3,
        dim: 8,
        n_mhca: 2,
        n_mhsa: 1,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        rpe_dropout_p: 0.1,
    };
    StudentModel::new(cfg, seed)
}

fn tiny_teacher(seed: u64) -> Result<TeacherModel<f64>> {
    let cfg = TeacherConfig { image_size: 8, in_channels: 3, widths: vec![4, 8], blocks_per_stage: 1, num_classes: 3 };
    let mut t = TeacherModel::new(cfg, seed)?;
    // Non-trivial running statistics.
    let mut rng = RngStream::new(seed ^ 0x5eed);
    for bn in t.bn_layers() {
        let c = t.params.value(bn.running_mean).numel();
        t.params.set_value(bn.running_mean, randn(&mut rng, &[c]).map(|v| 0.3 * v))?;
        t.params.set_value(bn.running_var, randn(&mut rng, &[c]).map(|v| 0.5 + v.abs()))?;
    }
    Ok(t)
}

fn case_student(rng: &mut RngStream) -> Result<GradCheckReport> {
    let model = tiny_student(rng.next_u64())?;
    let x = randn(rng, &[2, 3, 8, 8]);
    let (seed, drop_seed) = (rng.next_u64(), rng.next_u64());
    check_with_params(&model.params, x, SMOOTH_EPS, |g, b, x| {
        let mut r = RngStream::new(drop_seed);
        let out = model.forward(b, x, Some(&mut r))?;
        let mut total = projection(g, out.cls_logits, seed)?.add(projection(g, out.pooled_logits, seed + 1)?)?;
        for (k, h) in out.hidden.iter().enumerate() {
            total = total.add(projection(g, *h, seed + 2 + k as u64)?)?;
        }
        Ok(total)
    })
}

fn case_teacher(rng: &mut RngStream) -> Result<GradCheckReport> {
    let model = tiny_teacher(rng.next_u64())?;
    let x = randn(rng, &[3, 3, 8, 8]);
    let seed = rng.next_u64();
    check_with_params(&model.params, x, SMOOTH_EPS, |g, b, x| {
        let out = model.forward(b, x, BnMode::Train)?;
        let mut total = projection(g, out.logits, seed)?;
        for (k, t) in out.taps.iter().enumerate() {
            total = total.add(projection(g, *t, seed + 1 + k as u64)?)?;
        }
        Ok(total)
    })
}

fn case_aligner(rng: &mut RngStream) -> Result<GradCheckReport> {
    let side = dim(rng, 2, 3);
    let d = dim(rng, 2, 4);
    let target = (dim(rng, 2, 5), dim(rng, 2, 5), [d, d + 1][rng.below(2)]);
    let aligners = Aligners::<f64>::new(TapSpec { pairs: vec![(1, 1)] }, d, 1, &[target], rng.next_u64())?;
    let x = randn(rng, &[2, side * side, d]);
    let seed = rng.next_u64();
    check_with_params(&aligners.params, x, SMOOTH_EPS, |g, b, x| {
        let out = aligners.forward(b, &[x])?;
        projection(g, out[0], seed)
    })
}

fn case_stage1(rng: &mut RngStream) -> Result<GradCheckReport> {
    let student = tiny_student(rng.next_u64())?;
    let teacher = tiny_teacher(rng.next_u64())?;
    let taps = TapSpec { pairs: vec![(1, 1), (2, 2)] };
    let aligners = Aligners::<f64>::new(taps, 8, 2, &teacher.config.tap_shapes(), rng.next_u64())?;
    let images = randn(rng, &[2, 3, 8, 8]);
    let labels: Vec<usize> = (0..2).map(|_| rng.below(3)).collect();
    let weights = LossWeights { alpha: rng.uniform(), beta: 0.5 + rng.uniform() };
    // Teacher outputs are constants of the student objective.
    let (t_logits, t_taps) = {
        let g = Graph::new();
        let b = teacher.params.bind_frozen(&g);
        let out = teacher.forward(&b, g.constant(images.clone()), BnMode::Eval)?;
        let taps: Vec<Tensor<f64>> = aligners.teacher_targets(&out.taps)?.iter().map(|t| (*t.value()).clone()).collect();
        ((*out.logits.value()).clone(), taps)
    };
    let n_student = student.params.len();
    let mut inputs: Vec<Tensor<f64>> = student.params.iter().map(|(_, p)| (*p.value).clone()).collect();
    inputs.extend(aligners.params.iter().map(|(_, p)| (*p.value).clone()));
    let drop_seed = rng.next_u64();
    grad_check(
        |g, v| {
            let sb = Bound::from_vars(&student.params, v[..n_student].to_vec())?;
            let ab = Bound::from_vars(&aligners.params, v[n_student..].to_vec())?;
            let mut r = RngStream::new(drop_seed);
            let out = student.forward(&sb, g.constant(images.clone()), Some(&mut r))?;
            let aligned = aligners.forward(&ab, &out.hidden)?;
            let signal = TeacherSignal { logits: t_logits.clone(), taps: t_taps.iter().map(|t| g.constant(t.clone())).collect() };
            Ok(stage1_loss(&out, &aligned, Some(&signal), &labels, weights)?.total)
        },
        &inputs,
        SMOOTH_EPS,
    )
}

fn inversion_case(rng: &mut RngStream, labels: Vec<usize>, weights: InversionWeights) -> Result<GradCheckReport> {
    let teacher = tiny_teacher(rng.next_u64())?;
    let config = InversionConfig { weights, batch_size: labels.len(), classes_per_batch: 1, ..InversionConfig::desk() };
    let running = teacher.running_stats();
    let x = randn(rng, &[labels.len(), 3, 8, 8]);
    grad_check(|_, v| Ok(inversion_objective(&teacher, &running, v[0], &labels, &config)?.0), &[x], 1e-6)
}

/// Two images: classification, image priors and BN matching.
fn case_inversion_prior(rng: &mut RngStream) -> Result<GradCheckReport> {
    let w = InversionWeights { ep: 0.0, triplet: 0.0, ..InversionConfig::paper().weights };
    inversion_case(rng, vec![0, 1], w)
}

/// Four images in two classes: every term including intra-divergence.
fn case_inversion_full(rng: &mut RngStream) -> Result<GradCheckReport> {
    inversion_case(rng, vec![0, 0, 1, 1], InversionConfig::paper().weights)
}

fn cases() -> Vec<Case> {
    let linear = |name, run: Runner| Case { name, tolerance: LINEAR_TOL, run };
    let smooth = |name, run: Runner| Case { name, tolerance: SMOOTH_TOL, run };
    vec![
        linear("add", case_add),
        linear("sub", case_sub),
        linear("mul", case_mul),
        linear("scalar_ops", case_scalar_ops),
        linear("square", case_square),
        linear("relu", case_relu),
        linear("reductions", case_reductions),
        linear("shape_ops", case_shape_ops),
        linear("matmul", case_matmul),
        linear("conv2d", case_conv2d),
        linear("bilinear_resize", case_bilinear),
        linear("dropout", case_dropout),
        linear("mse", case_mse),
        linear("patchify", case_patchify),
        smooth("div", case_div),
        smooth("gelu", case_gelu),
        smooth("exp", case_exp),
        smooth("softplus", case_softplus),
        smooth("sqrt", case_sqrt),
        smooth("log", case_log),
        smooth("l2_norm", case_l2_norm),
        smooth("softmax", case_softmax),
        smooth("layer_norm", case_layer_norm),
        smooth("batch_norm_train", case_batch_norm_train),
        smooth("batch_norm_invert", case_batch_norm_invert),
        smooth("cross_entropy", case_cross_entropy),
        smooth("tv_reg", case_tv),
        smooth("mhsa", case_mhsa),
        smooth("mhca", case_mhca),
        smooth("aligner", case_aligner),
        smooth("student_forward", case_student),
        smooth("teacher_forward", case_teacher),
        smooth("stage1_loss", case_stage1),
        Case { name: "inversion_prior", tolerance: INVERSION_TOL, run: case_inversion_prior },
        Case { name: "inversion_full", tolerance: INVERSION_TOL, run: case_inversion_full },
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs one named case over `instances` random draws.
pub fn run_case(name: &str, instances: usize, seed: u64) -> Result<Option<CaseReport>> {
    let Some(case) = cases().into_iter().find(|c| c.name == name) else { return Ok(None) };
    let mut report = CaseReport { name: case.name, instances, coordinates: 0, refined: 0, max_rel_err: 0.0, tolerance: case.tolerance };
    for k in 0..instances {
        let mut rng = RngStream::derive(seed, k as u64);
        let r = (case.run)(&mut rng)?;
        report.coordinates += r.coordinates;
        report.refined += r.refined;
        report.max_rel_err = report.max_rel_err.max(r.max_rel_err);
    }
    Ok(Some(report))
}

/// Runs every case.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    case_names().into_iter().map(|n| run_case(n, instances, seed).map(|r| r.expect("known case"))).collect()
}
