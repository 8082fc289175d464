//! `dearkd` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dearkd::checkpoint::Checkpoint;
use dearkd::config::{DataSource, ExperimentConfig};
use dearkd::data::{self, MANIFEST};
use dearkd::logs::{attn_rows, CsvLog, ATTN_LOG};
use dearkd::{invert, train};
use dearkd_core::gradcheck::suite::run_suite;

#[derive(Parser)]
#[command(name = "dearkd", version, about = "Convolution-to-transformer distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config; missing keys take preset or built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied under the config file (desk-fast, desk-full).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CIFAR-10 binary directory or generated-image directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Stratified fraction of the training split to keep.
    #[arg(long)]
    subset_fraction: Option<f64>,
    /// Strict single-threaded mode (the default execution model).
    #[arg(long)]
    single_thread: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the BN-CNN teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Two-stage distillation of the student on real data.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Synthesize and filter images from the teacher.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Distill the student on generated images.
    DistillDf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Directory written by `invert` (overrides student.generated_dir).
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on the test split (CLS head for students).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Per-layer, per-head attention distances of a student checkpoint.
    AttnDistance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Finite-difference gradient checks of every primitive and objective.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
}

fn resolve(common: &Common, fallback: Option<ExperimentConfig>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (&common.config, &common.preset, fallback) {
        (Some(path), None, _) => ExperimentConfig::load(path)?,
        (Some(path), Some(preset), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut doc: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            doc.insert("preset".into(), toml::Value::String(preset.clone()));
            ExperimentConfig::from_toml(&toml::to_string(&doc)?)?
        }
        (None, Some(preset), _) => ExperimentConfig::preset(preset).with_context(|| format!("unknown preset {preset:?}"))?,
        (None, None, Some(cfg)) => cfg,
        (None, None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(dir) = &common.data {
        cfg.data.source = if dir.join(MANIFEST).exists() { DataSource::Generated } else { DataSource::Cifar10 };
        cfg.data.dir = Some(dir.clone());
    }
    if let Some(f) = common.subset_fraction {
        cfg.data.subset_fraction = f;
    }
    cfg.single_thread |= common.single_thread;
    cfg.validate()?;
    Ok(cfg)
}

fn is_teacher(ckpt: &Checkpoint) -> bool {
    ckpt.get("stem.conv.weight").is_some()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainTeacher { common } => {
            let cfg = resolve(&common, None)?;
            let s = train::run_train_teacher(&cfg)?;
            println!("teacher top1 {:.4}; checkpoint {}", s.final_top1, s.checkpoint.display());
        }
        Command::TrainStudent { common, teacher } => {
            let cfg = resolve(&common, None)?;
            let s = train::run_train_student(&cfg, &teacher)?;
            report_student(&cfg, &s);
        }
        Command::Invert { common, teacher } => {
            let cfg = resolve(&common, None)?;
            let s = invert::run_invert(&cfg, &teacher)?;
            println!("{} images in {} after {} batches", s.manifest.len(), s.dir.display(), s.batches.len());
        }
        Command::DistillDf { common, teacher, images } => {
            let mut cfg = resolve(&common, None)?;
            if images.is_some() {
                cfg.student.generated_dir = images;
            }
            let s = train::run_distill_df(&cfg, &teacher)?;
            report_student(&cfg, &s);
        }
        Command::Eval { common, ckpt } => {
            let stored = Checkpoint::load(&ckpt)?;
            let cfg = resolve(&common, Some(ExperimentConfig::from_toml(&stored.config_echo)?))?;
            let test = data::load_test(&cfg.data, cfg.seed)?;
            let (acc, ce) = if is_teacher(&stored) {
                train::eval_teacher(&train::load_teacher(&ckpt)?.0, &test)?
            } else {
                train::eval_student(&train::load_student(&ckpt)?.0, &test)?
            };
            println!("top1 {acc:.4} ce {ce:.4} on {} images", test.len());
        }
        Command::AttnDistance { common, ckpt } => {
            let stored = Checkpoint::load(&ckpt)?;
            if is_teacher(&stored) {
                bail!("{} is a teacher checkpoint; attention distances need a student", ckpt.display());
            }
            let cfg = resolve(&common, Some(ExperimentConfig::from_toml(&stored.config_echo)?))?;
            let (student, _) = train::load_student(&ckpt)?;
            let test = data::load_test(&cfg.data, cfg.seed)?;
            let report = train::attention_report(&student, &test, cfg.student.attn_eval_images, 0)?;
            std::fs::create_dir_all(&cfg.out_dir).with_context(|| cfg.out_dir.display().to_string())?;
            let path = cfg.out_dir.join(ATTN_LOG);
            CsvLog::create(&path)?.write(&attn_rows(&report))?;
            for (l, mean) in report.layer_means().iter().enumerate() {
                println!("layer {l}: mean distance {mean:.4}");
            }
            println!("wrote {}", path.display());
        }
        Command::GradCheck { seed, instances } => {
            let reports = run_suite(instances, seed)?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!("{status:4} {:<18} max_rel_err {:.3e} (tol {:.0e}, {} instances)", r.name, r.max_rel_err, r.tolerance, r.instances);
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
    }
    Ok(())
}

fn report_student(cfg: &ExperimentConfig, s: &train::TrainSummary) {
    let n_mhca = cfg.student.model.n_mhca;
    let at = |e: usize| s.attention.get(e).map(|r| r.mean_over(0..n_mhca));
    let tail = cfg.student.schedule.total_epochs.saturating_sub(1);
    let stage1_end = cfg.student.schedule.stage1_epochs.saturating_sub(1);
    println!("student top1 {:.4}; checkpoint {}", s.final_top1, s.checkpoint.display());
    if let (Some(a), Some(b)) = (at(stage1_end), at(tail)) {
        println!("MHCA attention distance: end of stage I {a:.4}, end of stage II {b:.4}");
    }
    println!("run log {}", s.run_log.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
