//! Teacher training, two-stage student distillation and evaluation.

use std::path::{Path, PathBuf};

use dearkd_core::distill::{schedule_at, stage1_loss, stage2_loss, Aligners, LossBreakdown, TeacherSignal};
use dearkd_core::metrics::{avg_attention_distance, top1, AttnDistanceReport};
use dearkd_core::models::{StudentModel, TeacherModel};
use dearkd_core::ops::BnMode;
use dearkd_core::optim::{cosine_lr, AdamConfig, AdamState};
use dearkd_core::{Graph, RngStream, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, OptimSettings};
use crate::data::{self, epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::logs::{attn_rows, CsvLog, RunLogRow, ATTN_LOG, RUN_LOG};

pub const TEACHER_CKPT: &str = "teacher.dkdc";
pub const STUDENT_CKPT: &str = "student.dkdc";
const EVAL_BATCH: usize = 100;

/// Files and final scores of one training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub run_log: PathBuf,
    pub final_top1: f64,
    /// Per-epoch attention distances (student runs only).
    pub attention: Vec<AttnDistanceReport>,
}

/// Rebuilds the teacher described by a checkpoint's config echo.
pub fn load_teacher(path: &Path) -> Result<(TeacherModel<f32>, ExperimentConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ExperimentConfig::from_toml(&ckpt.config_echo)?;
    let mut model = TeacherModel::new(cfg.teacher.model.clone(), cfg.seed)?;
    ckpt.restore(&mut model.params)?;
    Ok((model, cfg))
}

pub fn load_student(path: &Path) -> Result<(StudentModel<f32>, ExperimentConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ExperimentConfig::from_toml(&ckpt.config_echo)?;
    let mut model = StudentModel::new(cfg.student.model.clone(), cfg.seed)?;
    ckpt.restore(&mut model.params)?;
    Ok((model, cfg))
}

fn adam(o: &OptimSettings) -> AdamState<f32> {
    AdamState::new(AdamConfig { weight_decay: o.weight_decay, ..AdamConfig::default() })
}

/// Mini-batches of one epoch. A trailing batch of a single image is
/// dropped because train-mode batch norm needs two.
fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|c| c.len() >= 2)
}

fn steps_per_epoch(n: usize, size: usize) -> usize {
    n / size + usize::from(n % size >= 2)
}

fn check_images(data: &Dataset, side: usize, classes: usize, who: &str) -> Result<()> {
    if data.side != side || data.channels != 3 || data.classes != classes {
        return Err(Error::Config(format!(
            "{who} expects 3x{side}x{side} images over {classes} classes, data has {}x{}x{} over {}",
            data.channels, data.side, data.side, data.classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Config(format!("{who}: dataset is empty")));
    }
    Ok(())
}

/// Running sums over one epoch.
#[derive(Default)]
struct EpochStats {
    images: usize,
    correct: f64,
    total: f64,
    ce: f64,
    logit: f64,
    hidden: f64,
}

impl EpochStats {
    fn add(&mut self, n: usize, logits: &Tensor<f32>, labels: &[usize], b: &LossBreakdown<'_, f32>) {
        let w = n as f64;
        self.images += n;
        self.correct += top1(logits, labels) * w;
        self.total += b.total.item() as f64 * w;
        self.ce += b.ce * w;
        self.logit += b.logit * w;
        self.hidden += b.hidden * w;
    }

    fn row(&self, epoch: usize, lr: f64, stage: u8) -> RunLogRow {
        let n = self.images.max(1) as f64;
        RunLogRow {
            epoch,
            split: "train".into(),
            lr,
            stage,
            loss_total: self.total / n,
            loss_ce: self.ce / n,
            loss_logit: self.logit / n,
            loss_hidden: self.hidden / n,
            top1: self.correct / n,
        }
    }
}

fn test_row(epoch: usize, lr: f64, stage: u8, (acc, ce): (f64, f64)) -> RunLogRow {
    RunLogRow { epoch, split: "test".into(), lr, stage, loss_total: ce, loss_ce: ce, loss_logit: 0.0, loss_hidden: 0.0, top1: acc }
}

/// `(top1, mean CE)` of the teacher in eval mode.
pub fn eval_teacher(model: &TeacherModel<f32>, data: &Dataset) -> Result<(f64, f64)> {
    eval_with(data, |x, labels| {
        let g = Graph::new();
        let b = model.params.bind_frozen(&g);
        let logits = model.forward(&b, g.constant(x), BnMode::Eval)?.logits;
        Ok(((*logits.value()).clone(), logits.cross_entropy(labels)?.item() as f64))
    })
}

/// `(top1, mean CE)` of the student's CLS head, without dropout.
pub fn eval_student(model: &StudentModel<f32>, data: &Dataset) -> Result<(f64, f64)> {
    eval_with(data, |x, labels| {
        let g = Graph::new();
        let b = model.params.bind_frozen(&g);
        let logits = model.forward(&b, g.constant(x), None)?.cls_logits;
        Ok(((*logits.value()).clone(), logits.cross_entropy(labels)?.item() as f64))
    })
}

fn eval_with(data: &Dataset, mut f: impl FnMut(Tensor<f32>, &[usize]) -> Result<(Tensor<f32>, f64)>) -> Result<(f64, f64)> {
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut ce) = (0.0, 0.0);
    for idx in order.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(idx, None)?;
        let (logits, loss) = f(x, &labels)?;
        correct += top1(&logits, &labels) * idx.len() as f64;
        ce += loss * idx.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok((correct / n, ce / n))
}

/// Mean attention distance per layer and head over the first `limit`
/// images of `data`.
pub fn attention_report(model: &StudentModel<f32>, data: &Dataset, limit: usize, epoch: usize) -> Result<AttnDistanceReport> {
    let n = limit.min(data.len()).max(1).min(data.len());
    let grid = (model.config.grid(), model.config.grid());
    let order: Vec<usize> = (0..n).collect();
    let mut report: Option<AttnDistanceReport> = None;
    let mut seen = 0.0;
    for idx in order.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(idx, None)?;
        let g = Graph::new();
        let b = model.params.bind_frozen(&g);
        let out = model.forward(&b, g.constant(x), None)?;
        let heads = out.attn.iter().map(|a| avg_attention_distance(&a.value(), grid, true)).collect::<dearkd_core::Result<Vec<_>>>()?;
        let part = AttnDistanceReport { epoch, heads };
        let w = idx.len() as f64;
        match &mut report {
            None => report = Some(part),
            Some(r) => r.accumulate(&part, seen, w),
        }
        seen += w;
    }
    report.ok_or_else(|| Error::Config("attention report needs at least one image".into()))
}

/// Trains the BN-CNN teacher with cross-entropy and crop-and-flip
/// augmentation, logging one train and one test row per epoch.
pub fn run_train_teacher(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    cfg.echo()?;
    let train = data::load_train(&cfg.data, cfg.seed)?;
    let test = data::load_test(&cfg.data, cfg.seed)?;
    let tc = &cfg.teacher;
    check_images(&train, tc.model.image_size, tc.model.num_classes, "teacher")?;
    check_images(&test, tc.model.image_size, tc.model.num_classes, "teacher")?;
    let mut model = TeacherModel::<f32>::new(tc.model.clone(), cfg.seed)?;
    let mut opt = adam(&tc.optim);
    let bs = tc.optim.batch_size;
    let per_epoch = steps_per_epoch(train.len(), bs);
    let total = tc.epochs * per_epoch;
    let run_log = cfg.out_dir.join(RUN_LOG);
    let mut log = CsvLog::create(&run_log)?;
    let mut step = 0;
    let mut final_top1 = 0.0;
    for epoch in 0..tc.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut aug_rng = RngStream::derive(cfg.seed, 0xa060_0000 + epoch as u64);
        let epoch_lr = cosine_lr(step, total, tc.optim.lr, tc.optim.min_lr);
        let mut stats = EpochStats::default();
        for idx in batches(&order, bs) {
            let aug = tc.optim.augment.then_some((&mut aug_rng, cfg.data.crop_padding));
            let (x, labels) = train.batch(idx, aug)?;
            let g = Graph::new();
            let b = model.params.bind(&g);
            let out = model.forward(&b, g.constant(x), BnMode::Train)?;
            let loss = out.logits.cross_entropy(&labels)?;
            let breakdown = LossBreakdown { total: loss, ce: loss.item() as f64, logit: 0.0, hidden: 0.0 };
            stats.add(idx.len(), &out.logits.value(), &labels, &breakdown);
            let grads = g.backward(loss)?;
            model.params.accumulate(&b, &grads);
            let batch_stats = out.stat_values();
            drop(b);
            model.commit_running_stats(&batch_stats)?;
            opt.step_available(&mut model.params, cosine_lr(step, total, tc.optim.lr, tc.optim.min_lr));
            step += 1;
        }
        let eval = eval_teacher(&model, &test)?;
        final_top1 = eval.0;
        log::info!("teacher epoch {epoch}: train loss {:.4}, test top1 {:.4}", stats.total / stats.images.max(1) as f64, eval.0);
        log.write(&[stats.row(epoch, epoch_lr, 1), test_row(epoch, epoch_lr, 1, eval)])?;
    }
    let checkpoint = cfg.out_dir.join(TEACHER_CKPT);
    Checkpoint::from_store(&model.params, cfg.to_toml()?).save(&checkpoint)?;
    Ok(TrainSummary { checkpoint, run_log, final_top1, attention: Vec::new() })
}

/// Distills a student from the teacher at `teacher_ckpt` on the configured
/// training data.
pub fn run_train_student(cfg: &ExperimentConfig, teacher_ckpt: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let (teacher, _) = load_teacher(teacher_ckpt)?;
    let train = data::load_train(&cfg.data, cfg.seed)?;
    let test = data::load_test(&cfg.data, cfg.seed)?;
    train_student(cfg, &teacher, &train, &test)
}

/// Distills a student on generated images (`student.generated_dir`),
/// evaluating on the configured test split.
pub fn run_distill_df(cfg: &ExperimentConfig, teacher_ckpt: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = cfg.student.generated_dir.as_ref().ok_or_else(|| Error::Config("distill-df needs student.generated_dir".into()))?;
    let (teacher, _) = load_teacher(teacher_ckpt)?;
    let mut train = data::load_generated(dir, cfg.data.classes)?;
    train.standardize(&cfg.data.mean, &cfg.data.std)?;
    let test = data::load_test(&cfg.data, cfg.seed)?;
    train_student(cfg, &teacher, &train, &test)
}

/// The two-stage schedule: stage I mixes label CE, pooled-head
/// distillation and aligned hidden-state matching; stage II follows
/// `student.schedule.stage2_mode`. After every epoch the CLS head is
/// evaluated and attention distances are appended to the CSV series.
pub fn train_student(cfg: &ExperimentConfig, teacher: &TeacherModel<f32>, train: &Dataset, test: &Dataset) -> Result<TrainSummary> {
    let sc = &cfg.student;
    let m = &sc.model;
    if teacher.config.num_classes != m.num_classes || teacher.config.image_size != m.image_size {
        return Err(Error::Config(format!(
            "teacher ({} classes, {}px) and student ({} classes, {}px) disagree",
            teacher.config.num_classes, teacher.config.image_size, m.num_classes, m.image_size
        )));
    }
    let mut aligners = Aligners::<f32>::new(sc.taps.clone(), m.dim, m.n_mhca, &teacher.config.tap_shapes(), cfg.seed)?;
    check_images(train, m.image_size, m.num_classes, "student")?;
    check_images(test, m.image_size, m.num_classes, "student")?;
    cfg.echo()?;
    let mut student = StudentModel::<f32>::new(m.clone(), cfg.seed)?;
    let mut opt = adam(&sc.optim);
    let mut opt_align = adam(&sc.optim);
    let schedule = sc.schedule;
    let bs = sc.optim.batch_size;
    let per_epoch = steps_per_epoch(train.len(), bs);
    let total = schedule.total_epochs * per_epoch;
    let run_log = cfg.out_dir.join(RUN_LOG);
    let mut log = CsvLog::create(&run_log)?;
    let mut attn_log = CsvLog::create(&cfg.out_dir.join(ATTN_LOG))?;
    let mut attention = Vec::with_capacity(schedule.total_epochs);
    let mut step = 0;
    let mut final_top1 = 0.0;
    for epoch in 0..schedule.total_epochs {
        let plan = schedule_at(epoch, &schedule, sc.weights)?;
        student.set_rpe_trainable(!(plan.stage == 2 && schedule.freeze_rpe_in_stage2));
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut aug_rng = RngStream::derive(cfg.seed, 0xa057_0000 + epoch as u64);
        let epoch_lr = cosine_lr(step, total, sc.optim.lr, sc.optim.min_lr);
        let mut stats = EpochStats::default();
        for (k, idx) in batches(&order, bs).enumerate() {
            let aug = sc.optim.augment.then_some((&mut aug_rng, cfg.data.crop_padding));
            let (x, labels) = train.batch(idx, aug)?;
            let frac_epoch = epoch as f64 + k as f64 / per_epoch as f64;
            let weights = if plan.stage == 1 { sc.weights } else { schedule.stage2_weights(frac_epoch, sc.weights) };
            let g = Graph::new();
            let sb = student.params.bind(&g);
            let ab = aligners.params.bind(&g);
            let xv = g.constant(x);
            let mut drop_rng = RngStream::derive(cfg.seed, dropout_stream(step));
            let out = student.forward(&sb, xv, Some(&mut drop_rng))?;
            let signal = if weights.needs_teacher() {
                let tb = teacher.params.bind_frozen(&g);
                let t = teacher.forward(&tb, xv, BnMode::Eval)?;
                let taps = if plan.stage == 1 && weights.beta > 0.0 { aligners.teacher_targets(&t.taps)? } else { Vec::new() };
                Some(TeacherSignal { logits: (*t.logits.value()).clone(), taps })
            } else {
                None
            };
            let breakdown = if plan.stage == 1 {
                let aligned = if weights.beta > 0.0 { aligners.forward(&ab, &out.hidden)? } else { Vec::new() };
                stage1_loss(&out, &aligned, signal.as_ref(), &labels, weights)?
            } else {
                stage2_loss(&out, signal.as_ref(), &labels, frac_epoch, &schedule, sc.weights)?
            };
            if !breakdown.total.item().is_finite() {
                return Err(dearkd_core::Error::NonFiniteLoss { term: "student total", iteration: step }.into());
            }
            stats.add(idx.len(), &out.cls_logits.value(), &labels, &breakdown);
            let grads = g.backward(breakdown.total)?;
            student.params.accumulate(&sb, &grads);
            aligners.params.accumulate(&ab, &grads);
            drop((sb, ab));
            let lr = cosine_lr(step, total, sc.optim.lr, sc.optim.min_lr);
            opt.step_available(&mut student.params, lr);
            opt_align.step_available(&mut aligners.params, lr);
            step += 1;
        }
        let eval = eval_student(&student, test)?;
        final_top1 = eval.0;
        let report = attention_report(&student, test, sc.attn_eval_images, epoch)?;
        log::info!(
            "student epoch {epoch} (stage {}): train loss {:.4}, test top1 {:.4}, MHCA attention distance {:.3}",
            plan.stage,
            stats.total / stats.images.max(1) as f64,
            eval.0,
            report.mean_over(0..m.n_mhca)
        );
        log.write(&[stats.row(epoch, epoch_lr, plan.stage), test_row(epoch, epoch_lr, plan.stage, eval)])?;
        attn_log.write(&attn_rows(&report))?;
        attention.push(report);
    }
    let checkpoint = cfg.out_dir.join(STUDENT_CKPT);
    Checkpoint::from_store(&student.params, cfg.to_toml()?).save(&checkpoint)?;
    Ok(TrainSummary { checkpoint, run_log, final_top1, attention })
}

/// Random stream of the position-score dropout at a global step.
const fn dropout_stream(step: usize) -> u64 {
    0xd700_0000 + step as u64
}
