//! Experiment configuration.
//!
//! A config file is TOML. Every key is optional: missing keys take the
//! defaults of the named `preset` (or of `ExperimentConfig::default()` when no
//! preset is given), and command-line flags override both. The fully
//! resolved document is written to `config.resolved.toml` in the output
//! directory.

use std::path::{Path, PathBuf};

use dearkd_core::distill::{LossWeights, StageSchedule};
use dearkd_core::inversion::InversionConfig;
use dearkd_core::models::{StudentConfig, TapSpec, TeacherConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Standard CIFAR-10 per-channel statistics of pixels scaled to `[0, 1]`.
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Class-conditional Gaussian blobs.
    Synthetic,
    /// CIFAR-10 binary batches in `data.dir`.
    Cifar10,
    /// PNG images plus manifest written by `invert`.
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub image_size: usize,
    /// Pixel noise standard deviation around the class pattern.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { train: 1000, test: 200, image_size: 32, noise: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    pub classes: usize,
    /// Fraction of the training split kept by stratified sampling.
    pub subset_fraction: f64,
    pub synthetic: SyntheticSpec,
    /// Per-channel standardization applied to `[0, 1]` pixels.
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Zero-padding of the random crop.
    pub crop_padding: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            dir: None,
            classes: 10,
            subset_fraction: 1.0,
            synthetic: SyntheticSpec::default(),
            mean: CIFAR10_MEAN,
            std: CIFAR10_STD,
            crop_padding: 4,
        }
    }
}

/// Mini-batch optimizer settings (Adam with decoupled weight decay and a
/// per-step cosine schedule from `lr` to `min_lr`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSettings {
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub augment: bool,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings { batch_size: 128, lr: 5e-4, min_lr: 0.0, weight_decay: 0.05, augment: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub model: TeacherConfig,
    pub epochs: usize,
    pub optim: OptimSettings,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection { model: TeacherConfig::desk_teacher(), epochs: 3, optim: OptimSettings { lr: 2e-3, weight_decay: 5e-4, ..OptimSettings::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub model: StudentConfig,
    pub taps: TapSpec,
    pub weights: LossWeights,
    pub schedule: StageSchedule,
    pub optim: OptimSettings,
    /// Test images used for the per-epoch attention-distance report.
    pub attn_eval_images: usize,
    /// Generated-image directory consumed by `distill-df`.
    pub generated_dir: Option<PathBuf>,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            model: StudentConfig::desk_ti(),
            taps: TapSpec::desk_default(),
            weights: LossWeights::default(),
            schedule: StageSchedule::desk_fast(),
            optim: OptimSettings::default(),
            attn_eval_images: 64,
            generated_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionSection {
    pub config: InversionConfig,
    /// Number of filtered images to produce.
    pub count: usize,
    /// Abort when the filter keeps less than `1 - abort_reject_fraction` of
    /// the images over `abort_window` consecutive batches.
    pub abort_window: usize,
    pub abort_reject_fraction: f64,
}

impl Default for InversionSection {
    fn default() -> Self {
        InversionSection { config: InversionConfig::desk(), count: 48, abort_window: 10, abort_reject_fraction: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Named preset the file was resolved against.
    pub preset: Option<String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Run every loop on the calling thread. The harness has no worker
    /// threads, so this is always honoured; the key documents the mode.
    pub single_thread: bool,
    pub data: DataConfig,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub inversion: InversionSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            single_thread: true,
            data: DataConfig::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            inversion: InversionSection::default(),
        }
    }
}

pub const PRESETS: [&str; 2] = ["desk-fast", "desk-full"];

impl ExperimentConfig {
    /// `desk-fast`: 6-epoch schedule on synthetic data. `desk-full`: 60-epoch
    /// schedule on a 10% stratified CIFAR-10 subset with a 50-epoch teacher.
    pub fn preset(name: &str) -> Option<Self> {
        let base = ExperimentConfig { preset: Some(name.to_string()), ..Self::default() };
        match name {
            "desk-fast" => Some(base),
            "desk-full" => Some(ExperimentConfig {
                data: DataConfig { source: DataSource::Cifar10, subset_fraction: 0.1, ..DataConfig::default() },
                teacher: TeacherSection { epochs: 50, ..TeacherSection::default() },
                student: StudentSection { schedule: StageSchedule::desk_full(), ..StudentSection::default() },
                ..base
            }),
            _ => None,
        }
    }

    /// Parses a TOML document, applying its `preset` (if any) underneath.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = match doc.get("preset") {
            None => Self::default(),
            Some(toml::Value::String(name)) => Self::preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?} (known: {PRESETS:?})")))?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, doc);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.subset_fraction > 0.0 && d.subset_fraction <= 1.0) {
            return Err(Error::Config(format!("data.subset_fraction {} outside (0, 1]", d.subset_fraction)));
        }
        if d.std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::Config("data.std entries must be positive".into()));
        }
        if d.source == DataSource::Cifar10 && d.classes != 10 {
            return Err(Error::Config(format!("CIFAR-10 has 10 classes, data.classes is {}", d.classes)));
        }
        if d.source != DataSource::Synthetic && d.dir.is_none() {
            return Err(Error::Config(format!("data.source {:?} needs data.dir (or --data)", d.source)));
        }
        let syn = &d.synthetic;
        if d.classes == 0 || !syn.train.is_multiple_of(d.classes) || !syn.test.is_multiple_of(d.classes) {
            return Err(Error::Config("synthetic train/test counts must be multiples of the class count".into()));
        }
        for o in [&self.teacher.optim, &self.student.optim] {
            if o.batch_size == 0 || [o.lr, o.min_lr, o.weight_decay].iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
            }
        }
        self.student.model.validate()?;
        self.student.weights.validate()?;
        self.student.schedule.validate()?;
        self.inversion.config.validate()?;
        if !(0.0..=1.0).contains(&self.inversion.abort_reject_fraction) || self.inversion.abort_window == 0 {
            return Err(Error::Config("inversion abort window must be >= 1 and the fraction in [0, 1]".into()));
        }
        Ok(())
    }

    /// Writes the resolved config into the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).at(&self.out_dir)?;
        let path = self.out_dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).at(&path)?;
        Ok(path)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
