use dearkd_core::distill::Aligners;
use dearkd_core::inversion::{synthesize_batch, InversionConfig, InversionWeights};
use dearkd_core::models::{StudentConfig, StudentModel, TapSpec, TeacherConfig, TeacherModel};
use dearkd_core::ops::BnMode;
use dearkd_core::{Graph, RngStream, Tensor};

fn images(seed: u64, b: usize, size: usize) -> Tensor<f32> {
    let mut rng = RngStream::new(seed);
    Tensor::from_fn(&[b, 3, size, size], |_| rng.normal() as f32)
}

#[test]
fn paper_presets_track_deit_sizes() {
    // Exact DeiT-Ti/S/B parameter counts.
    for (cfg, reference) in [(StudentConfig::paper_ti(), 5_717_416.0), (StudentConfig::paper_s(), 22_050_664.0), (StudentConfig::paper_b(), 86_567_656.0)] {
        let n = cfg.param_count() as f64;
        assert!((n - reference).abs() / reference <= 0.05, "{n} vs {reference}");
    }
}

#[test]
fn desk_student_shapes() {
    let cfg = StudentConfig::desk_ti();
    assert_eq!((cfg.patches(), cfg.dim, cfg.n_mhca, cfg.n_mhsa, cfg.num_heads), (64, 96, 4, 2, 12));
    let m = StudentModel::<f32>::new(cfg, 1).unwrap();
    let g = Graph::new();
    let b = m.params.bind_frozen(&g);
    let out = m.forward(&b, g.constant(images(2, 3, 32)), None).unwrap();
    assert_eq!(out.cls_logits.shape(), vec![3, 10]);
    assert_eq!(out.pooled_logits.shape(), vec![3, 10]);
    assert_eq!(out.hidden.len(), 4);
    for h in &out.hidden {
        assert_eq!(h.shape(), vec![3, 64, 96]);
    }
    assert_eq!(out.attn.len(), 6);
    assert_eq!(out.attn[0].shape(), vec![3, 12, 65, 65]);
    let kinds: Vec<bool> = m.attention_layers().map(|a| a.rpe.is_some()).collect();
    assert_eq!(kinds, vec![true, true, true, true, false, false]);
}

#[test]
fn teacher_taps_and_eval_determinism() {
    let t = TeacherModel::<f32>::new(TeacherConfig::desk_teacher(), 3).unwrap();
    assert_eq!(t.config.tap_shapes(), vec![(32, 32, 32), (16, 16, 64), (8, 8, 128)]);
    let run = || {
        let g = Graph::new();
        let b = t.params.bind_frozen(&g);
        let out = t.forward(&b, g.constant(images(4, 2, 32)), BnMode::Eval).unwrap();
        let shapes: Vec<Vec<usize>> = out.taps.iter().map(|v| v.shape()).collect();
        ((*out.logits.value()).clone(), shapes)
    };
    let (a, shapes) = run();
    assert_eq!(shapes, vec![vec![2, 32, 32, 32], vec![2, 64, 16, 16], vec![2, 128, 8, 8]]);
    assert_eq!(a.shape(), &[2, 10]);
    let (b, _) = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn teacher_invert_stats_equal_brute_force() {
    let cfg = TeacherConfig { image_size: 8, widths: vec![4, 8], blocks_per_stage: 1, ..TeacherConfig::desk_teacher() };
    let t = TeacherModel::<f64>::new(cfg, 5).unwrap();
    let g = Graph::new();
    let b = t.params.bind_frozen(&g);
    let x = images(6, 3, 8).cast::<f64>();
    let out = t.forward(&b, g.constant(x), BnMode::Invert).unwrap();
    assert_eq!(out.bn_stats.len(), t.bn_layers().len());
    for (stats, input) in out.bn_stats.iter().zip(&out.bn_inputs) {
        let v = input.value();
        let s = v.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        for ch in 0..c {
            let mut sum = 0.0;
            for bi in 0..n {
                for k in 0..hw {
                    sum += v.data()[(bi * c + ch) * hw + k];
                }
            }
            let mean = sum / (n * hw) as f64;
            let mut sq = 0.0;
            for bi in 0..n {
                for k in 0..hw {
                    let d = v.data()[(bi * c + ch) * hw + k] - mean;
                    sq += d * d;
                }
            }
            assert_eq!(stats.mean.value().data()[ch], mean);
            assert_eq!(stats.var.value().data()[ch], sq / (n * hw) as f64);
        }
    }
    // Running statistics are untouched by an inversion pass.
    assert!(t.running_stats().iter().all(|(m, v)| m.data().iter().all(|&x| x == 0.0) && v.data().iter().all(|&x| x == 1.0)));
}

#[test]
fn aligners_reach_teacher_shapes() {
    let student = StudentConfig::desk_ti();
    let teacher = TeacherConfig::desk_teacher();
    let taps = TapSpec::desk_default();
    taps.validate(teacher.widths.len(), student.n_mhca).unwrap();
    let al = Aligners::<f32>::new(taps, student.dim, student.n_mhca, &teacher.tap_shapes(), 0).unwrap();
    let g = Graph::new();
    let b = al.params.bind_frozen(&g);
    let hidden: Vec<_> = (0..4).map(|_| g.constant(Tensor::<f32>::zeros(&[2, 64, 96]))).collect();
    let out = al.forward(&b, &hidden).unwrap();
    let shapes: Vec<Vec<usize>> = out.iter().map(|v| v.shape()).collect();
    assert_eq!(shapes, vec![vec![2, 32, 32, 32], vec![2, 16, 16, 64], vec![2, 8, 8, 128]]);
}

#[test]
fn tap_spec_rejects_bad_pairs() {
    assert!(TapSpec { pairs: vec![(1, 5)] }.validate(3, 4).is_err());
    assert!(TapSpec { pairs: vec![(2, 2), (1, 3)] }.validate(3, 4).is_err());
    assert!(TapSpec { pairs: vec![(1, 2), (2, 2)] }.validate(3, 4).is_err());
}

#[test]
fn zero_step_inversion_leaves_pixels_at_init() {
    let cfg = TeacherConfig { image_size: 8, widths: vec![4], blocks_per_stage: 1, num_classes: 3, ..TeacherConfig::desk_teacher() };
    let t = TeacherModel::<f64>::new(cfg, 2).unwrap();
    let zero = InversionWeights { tv: 0.0, l2: 0.0, bn: 0.0, ep: 0.0, triplet: 0.0, margin: 1.0 };
    let config = InversionConfig {
        weights: zero,
        batch_size: 2,
        classes_per_batch: 1,
        iterations: (1, 0),
        resolutions: (8, 8),
        learning_rates: (0.0, 0.0),
        ..InversionConfig::desk()
    };
    let a = synthesize_batch(&t, &[1, 1], &config, 0).unwrap();
    let b = synthesize_batch(&t, &[1, 1], &InversionConfig { iterations: (0, 0), ..config.clone() }, 0).unwrap();
    assert_eq!(a.pixels, b.pixels);
    assert_eq!(a.trace.history.len(), 1);
}
