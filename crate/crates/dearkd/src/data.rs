//! Datasets: CIFAR-10 binary batches, synthetic blobs and generated PNGs.
//!
//! Every source yields pixels in `[0, 1]` which are then standardized per
//! channel with `DataConfig::mean` / `DataConfig::std`.

use std::path::{Path, PathBuf};

use dearkd_core::{RngStream, Tensor};

use crate::config::{DataConfig, DataSource, SyntheticSpec};
use crate::error::{Error, IoContext, Result};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images `[N, C, S, S]` stored flat, with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, channels: usize, side: usize, classes: usize) -> Result<Self> {
        if images.len() != labels.len() * channels * side * side {
            return Err(Error::Config(format!("{} pixels for {} images of {channels}x{side}x{side}", images.len(), labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Config(format!("label {y} outside 0..{classes}")));
        }
        Ok(Dataset { images, labels, channels, side, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let images = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { images, labels, ..*self }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// `(x - mean[c]) / std[c]` in place.
    pub fn standardize(&mut self, mean: &[f64; 3], std: &[f64; 3]) -> Result<()> {
        if self.channels > 3 {
            return Err(Error::Config(format!("standardization constants cover 3 channels, images have {}", self.channels)));
        }
        let plane = self.side * self.side;
        for (k, px) in self.images.iter_mut().enumerate() {
            let c = (k / plane) % self.channels;
            *px = ((*px as f64 - mean[c]) / std[c]) as f32;
        }
        Ok(())
    }

    /// A mini-batch tensor `[B, C, S, S]` with optional crop-and-flip.
    pub fn batch(&self, indices: &[usize], augment: Option<(&mut RngStream, usize)>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        match augment {
            None => indices.iter().for_each(|&i| data.extend_from_slice(self.image(i))),
            Some((rng, pad)) => {
                let mut out = vec![0.0; n];
                for &i in indices {
                    let dy = rng.below(2 * pad + 1);
                    let dx = rng.below(2 * pad + 1);
                    let flip = rng.below(2) == 1;
                    crop_flip(self.image(i), &mut out, self.channels, self.side, pad, (dy, dx), flip);
                    data.extend_from_slice(&out);
                }
            }
        }
        let t = Tensor::new(&[indices.len(), self.channels, self.side, self.side], data)?;
        Ok((t, labels))
    }
}

/// Random crop of the zero-padded image at offset `(dy, dx)` of the padded
/// frame, then an optional horizontal flip.
pub fn crop_flip(src: &[f32], dst: &mut [f32], channels: usize, side: usize, pad: usize, (dy, dx): (usize, usize), flip: bool) {
    for c in 0..channels {
        for y in 0..side {
            let sy = (y + dy) as isize - pad as isize;
            for x in 0..side {
                let xo = if flip { side - 1 - x } else { x };
                let sx = (xo + dx) as isize - pad as isize;
                let inside = (0..side as isize).contains(&sy) && (0..side as isize).contains(&sx);
                dst[(c * side + y) * side + x] = if inside { src[(c * side + sy as usize) * side + sx as usize] } else { 0.0 };
            }
        }
    }
}

/// Epoch-`epoch` visiting order, a pure function of the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::derive(seed, 0xe90c_0000 + epoch as u64).shuffle(&mut order);
    order
}

/// Indices of a stratified subset: per class, `round(fraction * count)`
/// images (at least one when the class is present), drawn without
/// replacement by a seeded shuffle. Returned sorted.
pub fn stratified_subset(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let want = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        RngStream::derive(seed, 0x5b00_0000 + c as u64).shuffle(&mut members);
        keep.extend_from_slice(&members[..want]);
    }
    keep.sort_unstable();
    keep
}

/// Raw CIFAR-10 records: labels and `[0, 1]` pixels in R, G, B plane order.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: whole as u64,
            detail: format!("truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes", bytes.len() - whole),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let y = rec[0] as usize;
        if y >= CIFAR_CLASSES {
            return Err(Error::Format { path: path.to_path_buf(), offset: (r * CIFAR_RECORD) as u64, detail: format!("label {y} outside 0..10") });
        }
        labels.push(y);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(images, labels, 3, CIFAR_SIDE, CIFAR_CLASSES)
}

/// Reads one split from a directory of CIFAR-10 binary batches, unscaled.
pub fn load_cifar10_raw(dir: &Path, split: Split) -> Result<Dataset> {
    let files: &[&str] = match split {
        Split::Train => &CIFAR_TRAIN_FILES,
        Split::Test => &[CIFAR_TEST_FILE],
    };
    let mut out: Option<Dataset> = None;
    for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).at(&path)?;
        let part = parse_cifar10(&bytes, &path)?;
        match &mut out {
            None => out = Some(part),
            Some(d) => {
                d.images.extend(part.images);
                d.labels.extend(part.labels);
            }
        }
    }
    out.ok_or_else(|| Error::Config(format!("no CIFAR-10 files under {}", dir.display())))
}

/// Fixed per-class image pattern: a class colour plus one Gaussian blob
/// whose centre and per-channel sign depend on the class.
fn class_pattern(seed: u64, class: usize, side: usize) -> Vec<f32> {
    let mut rng = RngStream::derive(seed, 0xb10b_0000 + class as u64);
    let colour: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.25, 0.75)).collect();
    let sign: Vec<f64> = (0..3).map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 }).collect();
    let s = side as f64;
    let (cy, cx) = (rng.uniform_range(0.25 * s, 0.75 * s), rng.uniform_range(0.25 * s, 0.75 * s));
    let width = 0.15 * s;
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = 0.2 * sign[c] * (-r2 / (2.0 * width * width)).exp();
                out.push((colour[c] + blob) as f32);
            }
        }
    }
    out
}

/// Class-conditional Gaussian blobs: `spec.classes` fixed patterns plus
/// i.i.d. pixel noise, `n / classes` images per class in class-interleaved
/// order, clamped to `[0, 1]`. The patterns depend only on `seed`; the
/// noise also depends on the split.
pub fn synth_dataset(seed: u64, classes: usize, spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    let n = match split {
        Split::Train => spec.train,
        Split::Test => spec.test,
    };
    synth_images(seed, classes, n, spec.image_size, spec.noise, split as u64)
}

pub fn synth_images(seed: u64, classes: usize, n: usize, side: usize, noise: f64, stream: u64) -> Result<Dataset> {
    if classes == 0 || !n.is_multiple_of(classes) {
        return Err(Error::Config(format!("synthetic size {n} is not a multiple of {classes} classes")));
    }
    let patterns: Vec<Vec<f32>> = (0..classes).map(|c| class_pattern(seed, c, side)).collect();
    let mut rng = RngStream::derive(seed, 0xb10b_f000 + stream);
    let mut images = Vec::with_capacity(n * 3 * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        labels.push(y);
        images.extend(patterns[y].iter().map(|&p| (p as f64 + noise * rng.normal()).clamp(0.0, 1.0) as f32));
    }
    Dataset::new(images, labels, 3, side, classes)
}

/// One row of a generated-image manifest.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    pub file: String,
    pub class: usize,
    pub confidence: f64,
    pub batch: u64,
}

pub const MANIFEST: &str = "manifest.csv";

/// Generated images listed in `dir/manifest.csv`, unscaled.
pub fn load_generated(dir: &Path, classes: usize) -> Result<Dataset> {
    let rows = crate::logs::read_manifest(&dir.join(MANIFEST))?;
    let mut images = Vec::new();
    let mut labels = Vec::with_capacity(rows.len());
    let mut side = None;
    for row in &rows {
        let path = dir.join(&row.file);
        let (pixels, s) = crate::images::read_png(&path)?;
        if *side.get_or_insert(s) != s {
            return Err(Error::Image { path, detail: format!("size {s} differs from the first image ({})", side.unwrap_or(0)) });
        }
        images.extend(pixels);
        labels.push(row.class);
    }
    let side = side.ok_or_else(|| Error::Config(format!("{} lists no images", dir.join(MANIFEST).display())))?;
    Dataset::new(images, labels, 3, side, classes)
}

/// Training images for `config`: source, then stratified subset, then
/// standardization.
pub fn load_train(config: &DataConfig, seed: u64) -> Result<Dataset> {
    load(config, seed, Split::Train)
}

pub fn load_test(config: &DataConfig, seed: u64) -> Result<Dataset> {
    load(config, seed, Split::Test)
}

fn data_dir(config: &DataConfig) -> Result<&PathBuf> {
    config.dir.as_ref().ok_or_else(|| Error::Config(format!("data.source {:?} needs data.dir", config.source)))
}

fn load(config: &DataConfig, seed: u64, split: Split) -> Result<Dataset> {
    let mut d = match config.source {
        DataSource::Synthetic => synth_dataset(seed, config.classes, &config.synthetic, split)?,
        DataSource::Cifar10 => load_cifar10_raw(data_dir(config)?, split)?,
        DataSource::Generated => match split {
            Split::Train => load_generated(data_dir(config)?, config.classes)?,
            Split::Test => return Err(Error::Config("generated images have no test split".into())),
        },
    };
    if split == Split::Train && config.subset_fraction < 1.0 {
        d = d.select(&stratified_subset(&d.labels, d.classes, config.subset_fraction, seed));
    }
    d.standardize(&config.mean, &config.std)?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crafted_record() {
        let mut bytes = vec![255u8; CIFAR_RECORD];
        bytes[0] = 7;
        let d = parse_cifar10(&bytes, Path::new("x")).unwrap();
        assert_eq!(d.labels, vec![7]);
        assert!(d.images.iter().all(|&p| p == 1.0));
        let two = [bytes.clone(), bytes].concat();
        assert_eq!(parse_cifar10(&two, Path::new("x")).unwrap().len(), 2);
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = vec![0u8; CIFAR_RECORD + 10];
        match parse_cifar10(&bytes, Path::new("x")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        let mut bad = vec![0u8; 2 * CIFAR_RECORD];
        bad[CIFAR_RECORD] = 10;
        assert!(matches!(parse_cifar10(&bad, Path::new("x")), Err(Error::Format { offset, .. }) if offset == CIFAR_RECORD as u64));
    }

    #[test]
    fn subset_of_balanced_classes() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let keep = stratified_subset(&labels, 10, 0.1, 3);
        let mut counts = [0; 10];
        keep.iter().for_each(|&i| counts[labels[i]] += 1);
        assert_eq!(counts, [10; 10]);
        assert_eq!(keep, stratified_subset(&labels, 10, 0.1, 3));
        assert_ne!(keep, stratified_subset(&labels, 10, 0.1, 4));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec { train: 4, test: 2, image_size: 8, noise: 0.1 };
        let a = synth_dataset(5, 2, &spec, Split::Train).unwrap();
        assert_eq!(a, synth_dataset(5, 2, &spec, Split::Train).unwrap());
        assert_eq!(a.class_counts(), vec![2, 2]);
        assert_ne!(a.images, synth_dataset(6, 2, &spec, Split::Train).unwrap().images);
        assert!(synth_images(0, 3, 4, 8, 0.1, 0).is_err());
    }

    #[test]
    fn crop_flip_geometry() {
        let src: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let mut dst = vec![0.0; 9];
        crop_flip(&src, &mut dst, 1, 3, 1, (1, 1), false);
        assert_eq!(dst, src);
        crop_flip(&src, &mut dst, 1, 3, 1, (1, 1), true);
        assert_eq!(dst, vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0, 8.0, 7.0, 6.0]);
        crop_flip(&src, &mut dst, 1, 3, 1, (0, 0), false);
        assert_eq!(dst, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 3.0, 4.0]);
    }
}
