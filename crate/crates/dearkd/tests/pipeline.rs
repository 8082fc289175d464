//! End-to-end harness runs on the synthetic dataset: teacher training,
//! two-stage student distillation, inversion, checkpoints and the CLI.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use dearkd::checkpoint::Checkpoint;
use dearkd::config::{ExperimentConfig, SyntheticSpec, RESOLVED_CONFIG};
use dearkd::data::{load_test, MANIFEST};
use dearkd::invert::{invert_with, INVERSION_LOG};
use dearkd::logs::{read_manifest, read_run_log, ATTN_LOG};
use dearkd::train::{eval_teacher, load_student, load_teacher, run_train_student, run_train_teacher};
use dearkd::Error;
use dearkd_core::distill::LossWeights;
use dearkd_core::models::TapSpec;

struct SharedTeacher {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
    top1: f64,
    cfg: ExperimentConfig,
}

fn teacher() -> &'static SharedTeacher {
    static TEACHER: OnceLock<SharedTeacher> = OnceLock::new();
    TEACHER.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::preset("desk-fast").unwrap();
        cfg.seed = 1;
        cfg.out_dir = dir.path().join("teacher");
        let run = run_train_teacher(&cfg).expect("teacher training");
        SharedTeacher { ckpt: run.checkpoint, top1: run.final_top1, cfg, _dir: dir }
    })
}

fn small_student(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("desk-fast").unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.data.synthetic = SyntheticSpec { train: 60, test: 20, ..SyntheticSpec::default() };
    cfg.student.optim.batch_size = 30;
    cfg.student.attn_eval_images = 8;
    cfg
}

#[test]
fn teacher_fits_synthetic_classes() {
    let t = teacher();
    assert!(t.top1 >= 0.99, "teacher top1 {}", t.top1);
    let rows = read_run_log(&t.cfg.out_dir.join(dearkd::logs::RUN_LOG)).unwrap();
    assert_eq!(rows.len(), 2 * t.cfg.teacher.epochs);
    let (model, echo) = load_teacher(&t.ckpt).unwrap();
    assert_eq!(echo, t.cfg);
    let test = load_test(&t.cfg.data, t.cfg.seed).unwrap();
    let first = eval_teacher(&model, &test).unwrap();
    let second = eval_teacher(&model, &test).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.0, t.top1);
    let resolved = std::fs::read_to_string(t.cfg.out_dir.join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&resolved).unwrap(), t.cfg);
}

#[test]
fn teacher_checkpoint_round_trips_bitwise() {
    let t = teacher();
    let bytes = std::fs::read(&t.ckpt).unwrap();
    let (model, _) = load_teacher(&t.ckpt).unwrap();
    let stored = Checkpoint::load(&t.ckpt).unwrap();
    let again = Checkpoint::from_store(&model.params, stored.config_echo.clone());
    assert_eq!(again.to_bytes(), bytes);
}

#[test]
fn two_stage_schedule_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_student(dir.path());
    let run = run_train_student(&cfg, &teacher().ckpt).unwrap();
    let rows = read_run_log(&run.run_log).unwrap();
    let train: Vec<_> = rows.iter().filter(|r| r.split == "train").collect();
    let stages: Vec<u8> = train.iter().map(|r| r.stage).collect();
    assert_eq!(stages, vec![1, 1, 1, 1, 1, 2]);
    assert!(train.iter().take(5).all(|r| r.loss_hidden > 0.0 && r.loss_logit > 0.0));
    assert_eq!(train[5].loss_hidden, 0.0);
    let attn: Vec<dearkd::logs::AttnDistanceRow> = dearkd::logs::read_csv(&cfg.out_dir.join(ATTN_LOG)).unwrap();
    assert_eq!(attn.len(), 6 * 6 * 12);
    assert_eq!(run.attention.len(), 6);

    let (student, echo) = load_student(&run.checkpoint).unwrap();
    assert_eq!(echo, cfg);
    let again = Checkpoint::from_store(&student.params, Checkpoint::load(&run.checkpoint).unwrap().config_echo);
    assert_eq!(again.to_bytes(), std::fs::read(&run.checkpoint).unwrap());
}

#[test]
fn ce_only_weights_zero_distillation_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_student(dir.path());
    cfg.student.weights = LossWeights { alpha: 1.0, beta: 0.0 };
    cfg.student.schedule.total_epochs = 2;
    cfg.student.schedule.stage1_epochs = 1;
    let run = run_train_student(&cfg, &teacher().ckpt).unwrap();
    let rows = read_run_log(&run.run_log).unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| r.split == "train") {
        assert_eq!((r.loss_logit, r.loss_hidden), (0.0, 0.0));
        assert!((r.loss_total - r.loss_ce).abs() <= 1e-9 * r.loss_ce.abs());
    }
}

#[test]
fn tap_mismatch_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    for pairs in [vec![(4, 2)], vec![(1, 5)], vec![(1, 2), (1, 2)]] {
        let mut cfg = small_student(dir.path());
        cfg.student.taps = TapSpec { pairs };
        match run_train_student(&cfg, &teacher().ckpt) {
            Err(Error::Core(_)) | Err(Error::Config(_)) => {}
            other => panic!("expected a configuration error, got {other:?}"),
        }
        assert!(!cfg.out_dir.join(dearkd::logs::RUN_LOG).exists());
    }
}

fn inversion_config(out: &Path, count: usize) -> ExperimentConfig {
    let mut cfg = teacher().cfg.clone();
    cfg.out_dir = out.to_path_buf();
    cfg.inversion.count = count;
    cfg.inversion.config.iterations = (40, 40);
    cfg
}

#[test]
fn inversion_fills_balanced_quotas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = inversion_config(dir.path(), 48);
    let (model, _) = load_teacher(&teacher().ckpt).unwrap();
    let run = invert_with(&cfg, &model).unwrap();
    let manifest = read_manifest(&dir.path().join(MANIFEST)).unwrap();
    assert_eq!(manifest, run.manifest);
    assert_eq!(manifest.len(), 48);
    let mut counts = [0usize; 10];
    for row in &manifest {
        counts[row.class] += 1;
        assert!(row.confidence >= cfg.inversion.config.confidence_threshold);
        assert!(dir.path().join(&row.file).exists());
    }
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "class counts {counts:?}");
    let loaded = dearkd::data::load_generated(dir.path(), 10).unwrap();
    assert_eq!(loaded.len(), 48);
    assert!(dir.path().join(INVERSION_LOG).exists());
}

#[test]
fn inversion_is_deterministic() {
    let (model, _) = load_teacher(&teacher().ckpt).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = invert_with(&inversion_config(a.path(), 6), &model).unwrap();
    let rb = invert_with(&inversion_config(b.path(), 6), &model).unwrap();
    assert_eq!(ra.manifest, rb.manifest);
    for row in &ra.manifest {
        assert_eq!(std::fs::read(a.path().join(&row.file)).unwrap(), std::fs::read(b.path().join(&row.file)).unwrap());
    }
}

#[test]
fn inversion_aborts_when_filter_rejects_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = inversion_config(dir.path(), 12);
    cfg.inversion.config.iterations = (1, 1);
    cfg.inversion.config.confidence_threshold = 1.0;
    cfg.inversion.abort_window = 2;
    let (model, _) = load_teacher(&teacher().ckpt).unwrap();
    match invert_with(&cfg, &model) {
        Err(Error::Abort(msg)) => assert!(msg.contains("rejected"), "{msg}"),
        other => panic!("expected abort, got {other:?}"),
    }
    assert!(dir.path().join(MANIFEST).exists());
}

#[test]
fn cli_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(
        &config,
        "preset = \"desk-fast\"\n\n[data.synthetic]\ntrain = 40\ntest = 20\n\n[teacher]\nepochs = 1\nmodel = { widths = [8, 16, 32], blocks_per_stage = 1 }\n\n[teacher.optim]\nbatch_size = 20\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_dearkd");
    let out = dir.path().join("run");
    let status = Command::new(bin).args(["train-teacher", "--config"]).arg(&config).arg("--out").arg(&out).arg("--seed").arg("3").output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let ckpt = out.join(dearkd::train::TEACHER_CKPT);
    assert!(ckpt.exists());
    let eval = |bin: &str| Command::new(bin).arg("eval").arg("--ckpt").arg(&ckpt).output().unwrap();
    let (a, b) = (eval(bin), eval(bin));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("top1 "));
    assert_eq!(a.stdout, b.stdout);

    let bad = Command::new(bin).arg("attn-distance").arg("--ckpt").arg(&ckpt).output().unwrap();
    assert!(!bad.status.success());
    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "[teacher]\nepoch = 3\n").unwrap();
    let rejected = Command::new(bin).args(["train-teacher", "--config"]).arg(&unknown).output().unwrap();
    assert!(!rejected.status.success());
}
