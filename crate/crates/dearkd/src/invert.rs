//! Data-free image generation: repeated batch synthesis, confidence
//! filtering and PNG export.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use dearkd_core::inversion::{filter_confident, grouped_labels, synthesize_batch, InversionTerms};
use dearkd_core::models::TeacherModel;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{ManifestRow, MANIFEST};
use crate::error::{Error, IoContext, Result};
use crate::images::{unstandardize, write_png};
use crate::logs::{write_manifest, CsvLog};
use crate::train::load_teacher;

pub const INVERSION_LOG: &str = "inversion_log.csv";

/// Per-batch diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRow {
    pub batch: u64,
    pub classes: String,
    pub ce_init: f64,
    pub ce_final: f64,
    pub bn_init: f64,
    pub bn_final: f64,
    pub passed: usize,
    pub kept: usize,
    pub median_confidence: f64,
}

#[derive(Debug, Clone)]
pub struct InvertSummary {
    pub dir: PathBuf,
    pub manifest: Vec<ManifestRow>,
    pub batches: Vec<BatchRow>,
}

/// Classes for the next batch: the `k` with the largest remaining quota,
/// ties broken by the fewest times chosen so far, then by index.
fn next_classes(remaining: &[usize], chosen: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..remaining.len()).filter(|&c| remaining[c] > 0).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(remaining[c]), chosen[c], c));
    let mut out: Vec<usize> = order.into_iter().take(k).collect();
    if out.len() < k {
        let mut rest: Vec<usize> = (0..remaining.len()).filter(|c| !out.contains(c)).collect();
        rest.sort_by_key(|&c| (chosen[c], c));
        out.extend(rest.into_iter().take(k - out.len()));
    }
    out.sort_unstable();
    out
}

/// Balanced per-class image quotas summing to `count`.
pub fn class_quotas(count: usize, classes: usize) -> Vec<usize> {
    (0..classes).map(|c| count / classes + usize::from(c < count % classes)).collect()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn run_invert(cfg: &ExperimentConfig, teacher_ckpt: &Path) -> Result<InvertSummary> {
    cfg.validate()?;
    let (teacher, _) = load_teacher(teacher_ckpt)?;
    invert_with(cfg, &teacher)
}

/// Synthesizes batches until `inversion.count` images pass the teacher's
/// confidence filter, honouring balanced per-class quotas. Aborts when the
/// filter rejects more than `abort_reject_fraction` of all images in the
/// last `abort_window` batches.
pub fn invert_with(cfg: &ExperimentConfig, teacher: &TeacherModel<f32>) -> Result<InvertSummary> {
    let inv = &cfg.inversion;
    let mut icfg = inv.config.clone();
    icfg.seed = cfg.seed;
    icfg.validate()?;
    let classes = teacher.config.num_classes;
    if icfg.classes_per_batch > classes {
        return Err(Error::Config(format!("{} classes per batch but the teacher has {classes}", icfg.classes_per_batch)));
    }
    if teacher.config.in_channels != 3 || icfg.resolutions.1 != teacher.config.image_size {
        return Err(Error::Config(format!("final resolution {} must match the teacher's {}px RGB input", icfg.resolutions.1, teacher.config.image_size)));
    }
    cfg.echo()?;
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).at(&dir)?;
    let per_class = icfg.batch_size / icfg.classes_per_batch;
    let mut remaining = class_quotas(inv.count, classes);
    let mut chosen = vec![0usize; classes];
    let mut window: VecDeque<(usize, usize)> = VecDeque::new();
    let mut manifest = Vec::with_capacity(inv.count);
    let mut rows = Vec::new();
    let mut log = CsvLog::create(&dir.join(INVERSION_LOG))?;
    let side = icfg.resolutions.1;
    let mut batch = 0u64;
    while remaining.iter().any(|&r| r > 0) {
        let picked = next_classes(&remaining, &chosen, icfg.classes_per_batch);
        picked.iter().for_each(|&c| chosen[c] += 1);
        let labels = grouped_labels(&picked, per_class);
        let out = synthesize_batch(teacher, &labels, &icfg, batch)?;
        let filter = filter_confident(teacher, &out.pixels, &labels, icfg.confidence_threshold, icfg.confidence_scale)?;
        let mut kept = 0;
        for &i in &filter.kept {
            let y = labels[i];
            if remaining[y] == 0 {
                continue;
            }
            remaining[y] -= 1;
            kept += 1;
            let n = 3 * side * side;
            let pixels = unstandardize(&out.pixels.data()[i * n..(i + 1) * n], &cfg.data.mean, &cfg.data.std);
            let file = format!("img_{batch:05}_{i:03}.png");
            write_png(&dir.join(&file), &pixels, side)?;
            manifest.push(ManifestRow { file, class: y, confidence: filter.confidence[i], batch });
        }
        let (init, fin): (&InversionTerms, &InversionTerms) = (&out.trace.initial, &out.trace.final_terms);
        let row = BatchRow {
            batch,
            classes: picked.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
            ce_init: init.ce,
            ce_final: fin.ce,
            bn_init: init.bn,
            bn_final: fin.bn,
            passed: filter.kept.len(),
            kept,
            median_confidence: median(&mut filter.confidence.clone()),
        };
        log::info!("inversion batch {batch}: classes [{}], passed {}/{}, bn {:.3} -> {:.3}", row.classes, row.passed, labels.len(), row.bn_init, row.bn_final);
        log.write(std::slice::from_ref(&row))?;
        rows.push(row);
        window.push_back((labels.len() - filter.kept.len(), labels.len()));
        if window.len() > inv.abort_window {
            window.pop_front();
        }
        if window.len() == inv.abort_window {
            let (rejected, total) = window.iter().fold((0, 0), |(r, t), &(a, b)| (r + a, t + b));
            if rejected as f64 > inv.abort_reject_fraction * total as f64 {
                write_manifest(&dir.join(MANIFEST), &manifest)?;
                return Err(Error::Abort(format!(
                    "the confidence filter (threshold {}) rejected {rejected} of {total} images over the last {} batches; \
                     {} of {} images kept so far. Check the teacher checkpoint or lower the threshold.",
                    icfg.confidence_threshold,
                    inv.abort_window,
                    manifest.len(),
                    inv.count
                )));
            }
        }
        batch += 1;
    }
    write_manifest(&dir.join(MANIFEST), &manifest)?;
    Ok(InvertSummary { dir, manifest, batches: rows })
}
