//! Attention locality, accuracy and latent diversity.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::RelPosTable;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::argmax_rows;
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Mean attention distance per head of `attn: [B, H, T, T]`, in patch-grid
/// units: the average over images and patch queries `i` of
/// `sum_j A_ij |p_i - p_j|`, with CLS rows and columns left out.
pub fn avg_attention_distance<T: Element>(attn: &Tensor<T>, grid: (usize, usize), has_cls: bool) -> Result<Vec<f64>> {
    let table = RelPosTable::<f64>::new(grid, has_cls);
    let t = table.tokens();
    let s = attn.shape();
    if s.len() != 4 || s[2] != t || s[3] != t {
        return Err(Error::InvalidShape { op: "avg_attention_distance", shape: s.to_vec(), reason: format!("expected [B, H, {t}, {t}]") });
    }
    let (b, h) = (s[0], s[1]);
    let first = usize::from(has_cls);
    let mut dist = vec![0.0; t * t];
    for i in first..t {
        for j in first..t {
            let (d1, d2) = table.offset(i, j).expect("patch tokens");
            dist[i * t + j] = ((d1 * d1 + d2 * d2) as f64).sqrt();
        }
    }
    let data = attn.data();
    let mut out = vec![0.0; h];
    for bi in 0..b {
        for (hi, acc) in out.iter_mut().enumerate() {
            let base = (bi * h + hi) * t * t;
            for i in first..t {
                let row = &data[base + i * t..base + (i + 1) * t];
                let total: f64 = row.iter().map(|v| v.as_f64()).sum();
                if !(total - 1.0).abs().le(&1e-3) || row.iter().any(|v| v.as_f64() < 0.0) {
                    return Err(Error::Domain { op: "avg_attention_distance", detail: format!("row {i} of head {hi} is not stochastic (sum {total})") });
                }
                *acc += row[first..].iter().zip(&dist[i * t + first..(i + 1) * t]).map(|(a, d)| a.as_f64() * d).sum::<f64>();
            }
        }
    }
    let queries = (b * (t - first)) as f64;
    Ok(out.into_iter().map(|v| v / queries).collect())
}

/// Per-layer, per-head attention distances at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnDistanceReport {
    pub epoch: usize,
    /// `heads[layer][head]`.
    pub heads: Vec<Vec<f64>>,
}

impl AttnDistanceReport {
    pub fn layer_means(&self) -> Vec<f64> {
        self.heads.iter().map(|h| h.iter().sum::<f64>() / h.len().max(1) as f64).collect()
    }

    /// Mean of the layer means over `layers` (0-based indices).
    pub fn mean_over(&self, layers: core::ops::Range<usize>) -> f64 {
        let means = self.layer_means();
        let sel = &means[layers];
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }

    /// Merges two reports over disjoint batches, weighting by image count.
    pub fn accumulate(&mut self, other: &AttnDistanceReport, weight_self: f64, weight_other: f64) {
        let total = weight_self + weight_other;
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = (*x * weight_self + y * weight_other) / total;
            }
        }
    }
}

/// Mean pairwise latent distance within each class.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    /// `(class, mean pairwise distance)` in ascending class order.
    pub per_class: Vec<(usize, f64)>,
    /// Classes left out for having a single sample.
    pub skipped: Vec<usize>,
    /// Mean of the per-class values, 0 when none qualify.
    pub overall: f64,
}

pub fn feature_diversity<T: Element>(embeds: &Tensor<T>, labels: &[usize]) -> Result<DiversityReport> {
    let s = embeds.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch { op: "feature_diversity", lhs: s.to_vec(), rhs: vec![labels.len(), 0] });
    }
    let f = s[1];
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    let row = |i: usize| &embeds.data()[i * f..(i + 1) * f];
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for (class, members) in groups {
        if members.len() < 2 {
            skipped.push(class);
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (k, &i) in members.iter().enumerate() {
            for &j in &members[k + 1..] {
                let d2: f64 = row(i).iter().zip(row(j)).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
                sum += d2.sqrt();
                pairs += 1;
            }
        }
        per_class.push((class, sum / pairs as f64));
    }
    let overall = if per_class.is_empty() { 0.0 } else { per_class.iter().map(|c| c.1).sum::<f64>() / per_class.len() as f64 };
    Ok(DiversityReport { per_class, skipped, overall })
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn top1<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}
