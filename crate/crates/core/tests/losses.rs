use dearkd_core::distill::{hidden_loss, logit_loss, schedule_at, stage1_loss, LossWeights, Stage2Mode, StageSchedule, TeacherSignal};
use dearkd_core::inversion::{
    bn_reg, ep_loss, filter_logits, intra_div_loss, l2_reg, select_easiest_positive, select_hardest_negative, select_hardest_positive, triplet_loss, tv_reg,
    ConfidenceScale, InversionWeights,
};
use dearkd_core::models::StudentOutput;
use dearkd_core::ops::BatchNormStats;
use dearkd_core::{Graph, RngStream, Tensor};
use proptest::prelude::*;

fn euclid(e: &Tensor<f64>, a: usize, b: usize) -> f64 {
    let f = e.shape()[1];
    let mut s = 0.0;
    for k in 0..f {
        let d = e.at(&[a, k]) - e.at(&[b, k]);
        s += d * d;
    }
    s.sqrt()
}

/// Exhaustive scan: `pick(candidate_dist, best_dist)` decides replacement.
fn oracle(e: &Tensor<f64>, labels: &[usize], a: usize, same: bool, farthest: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..labels.len() {
        let eligible = j != a && ((labels[j] == labels[a]) == same);
        if !eligible {
            continue;
        }
        let d = euclid(e, a, j);
        let replace = match best {
            None => true,
            Some((_, bd)) => {
                if farthest {
                    d > bd
                } else {
                    d < bd
                }
            }
        };
        if replace {
            best = Some((j, d));
        }
    }
    best.map(|b| b.0)
}

/// Small integer embeddings so distance ties are frequent and exact.
fn instance(rng: &mut RngStream) -> (Tensor<f64>, Vec<usize>) {
    let n = 2 + rng.below(9);
    let f = 1 + rng.below(3);
    let classes = 1 + rng.below(3);
    let labels = (0..n).map(|_| rng.below(classes)).collect();
    (Tensor::from_fn(&[n, f], |_| rng.below(5) as f64 - 2.0), labels)
}

#[test]
fn mining_matches_brute_force() {
    let mut rng = RngStream::new(99);
    let mut checked = [0usize; 3];
    for _ in 0..100 {
        let (e, labels) = instance(&mut rng);
        for a in 0..labels.len() {
            let cases = [
                (select_easiest_positive(&e, &labels, a).ok(), oracle(&e, &labels, a, true, false)),
                (select_hardest_positive(&e, &labels, a).ok(), oracle(&e, &labels, a, true, true)),
                (select_hardest_negative(&e, &labels, a).ok(), oracle(&e, &labels, a, false, false)),
            ];
            for (k, (got, want)) in cases.into_iter().enumerate() {
                assert_eq!(got, want, "op {k} anchor {a} labels {labels:?} embeds {:?}", e.data());
                checked[k] += usize::from(want.is_some());
            }
        }
    }
    assert!(checked.iter().all(|&c| c >= 100), "{checked:?}");
}

#[test]
fn mining_worked_examples() {
    let e = Tensor::<f64>::from_f64(&[3, 1], &[0.0, 0.5, 2.0]).unwrap();
    assert_eq!(select_easiest_positive(&e, &[0, 0, 0], 0).unwrap(), 1);
    let e = Tensor::<f64>::from_f64(&[3, 1], &[0.0, 1.0, 1.0]).unwrap();
    assert_eq!(select_easiest_positive(&e, &[0, 0, 0], 0).unwrap(), 1);
    assert_eq!(select_hardest_positive(&e, &[0, 0, 0], 0).unwrap(), 1);
    let e = Tensor::<f64>::from_f64(&[5, 1], &[0.0, 0.5, 2.0, 1.0, 3.0]).unwrap();
    let labels = [0, 0, 0, 1, 1];
    assert_eq!(select_hardest_positive(&e, &labels, 0).unwrap(), 2);
    assert_eq!(select_hardest_negative(&e, &labels, 0).unwrap(), 3);
}

#[test]
fn loss_worked_examples() {
    let g = Graph::<f64>::new();
    // Anchor with hardest positive at 2.0 and hardest negative at 1.0.
    let e = g.constant(Tensor::from_f64(&[4, 1], &[0.0, 2.0, 1.0, 1.0]).unwrap());
    let all = triplet_loss(e, &[0, 0, 1, 1], 0.5).unwrap().item();
    // Anchors: 0 -> max(0, 2-1+.5)=1.5; 1 -> max(0, 2-1+.5)=1.5; 2 -> max(0, 0-1+.5)=0; 3 -> 0.
    assert!((all - 0.75).abs() <= 1e-9);
    let single = Tensor::from_f64(&[1], &[2.0]).unwrap();
    let d_ap = g.constant(single.clone());
    let hinge = d_ap.sub(g.scalar(1.0)).unwrap().add_scalar(0.5).relu().mean().item();
    assert!((hinge - 1.5).abs() <= 1e-9);

    let e = g.constant(Tensor::from_f64(&[2, 1], &[0.0, 0.5]).unwrap());
    assert!((ep_loss(e, &[0, 0]).unwrap().item() + 0.5).abs() <= 1e-9);

    let c = 7;
    let stats = [BatchNormStats { mean: g.constant(Tensor::ones(&[c])), var: g.constant(Tensor::full(&[c], 2.0)) }];
    let running = [(Tensor::zeros(&[c]), Tensor::full(&[c], 2.0))];
    assert!((bn_reg(&stats, &running).unwrap().item() - (c as f64).sqrt()).abs() <= 1e-9);

    let x = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap());
    assert!((tv_reg(x).unwrap().item() - 0.25).abs() <= 1e-9);

    let pooled = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
    let teacher = Tensor::from_f64(&[1, 2], &[0.0, 3.0]).unwrap();
    assert!((logit_loss(pooled, &teacher).unwrap().item() - 2f64.ln()).abs() <= 1e-9);
}

#[test]
fn intra_div_combination() {
    let g = Graph::<f64>::new();
    // Two classes: class 0 at {0, 0.5}, class 1 at {10, 10.5}; triplet hinge is inactive.
    let e = g.constant(Tensor::from_f64(&[4, 1], &[0.0, 0.5, 10.0, 10.5]).unwrap());
    let labels = [0, 0, 1, 1];
    let w = InversionWeights { tv: 0.0, l2: 0.0, bn: 0.0, ep: 50.0, triplet: 0.5, margin: 1.0 };
    let ep = ep_loss(e, &labels).unwrap().item();
    let tr = triplet_loss(e, &labels, 1.0).unwrap().item();
    let total = intra_div_loss(e, &labels, &w).unwrap().item();
    assert!((total - (50.0 * ep + 0.5 * tr)).abs() <= 1e-12);
    assert!((50.0 * -0.5 + 0.5 * 1.5 - -24.25f64).abs() <= 1e-12);
    let zero = InversionWeights { ep: 0.0, triplet: 0.0, ..w };
    assert_eq!(intra_div_loss(e, &labels, &zero).unwrap().item(), 0.0);
}

#[test]
fn spreading_a_cluster_lowers_ep_loss() {
    let g = Graph::<f64>::new();
    let tight = g.constant(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 0.3, 0.4]).unwrap());
    let wide = g.constant(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 0.6, 0.8]).unwrap());
    assert!(ep_loss(wide, &[1, 1]).unwrap().item() < ep_loss(tight, &[1, 1]).unwrap().item());
}

#[test]
fn filter_keeps_confident_only() {
    // Two classes: p(target) = 0.05 and 0.5.
    let l05 = (0.05f64 / 0.95).ln();
    let logits = Tensor::<f64>::from_f64(&[2, 2], &[l05, 0.0, 0.0, 0.0]).unwrap();
    let r = filter_logits(&logits, &[0, 0], 0.1, ConfidenceScale::Probability);
    assert_eq!(r.kept, vec![1]);
    assert!((r.confidence[0] - 0.05).abs() < 1e-12 && (r.confidence[1] - 0.5).abs() < 1e-12);
    assert_eq!(filter_logits(&logits, &[0, 0], 0.0, ConfidenceScale::Probability).kept, vec![0, 1]);
    assert!(filter_logits(&logits, &[0, 0], 1.0, ConfidenceScale::Probability).kept.is_empty());
}

#[test]
fn image_priors_vanish_on_constant_images() {
    let g = Graph::<f64>::new();
    assert_eq!(tv_reg(g.constant(Tensor::full(&[2, 3, 5, 4], -1.5))).unwrap().item(), 0.0);
    let zero = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    assert_eq!(tv_reg(zero).unwrap().item(), 0.0);
    assert_eq!(l2_reg(zero).item(), 0.0);
    assert_eq!(l2_reg(g.constant(Tensor::ones(&[1, 3, 4, 4]))).item(), 1.0);
    assert_eq!(l2_reg(g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap())).item(), 12.5);
}

#[test]
fn schedule_is_a_single_step() {
    let s = StageSchedule::desk_fast();
    let w = LossWeights::default();
    let stages: Vec<u8> = (0..6).map(|e| schedule_at(e, &s, w).unwrap().stage).collect();
    assert_eq!(stages, vec![1, 1, 1, 1, 1, 2]);
    assert!(schedule_at(6, &s, w).is_err());
    let anneal = StageSchedule { stage2_mode: Stage2Mode::Anneal, ..StageSchedule::desk_full() };
    let mut prev = 0.0;
    for k in 0..=100 {
        let epoch = 50.0 + 10.0 * k as f64 / 100.0;
        let a = anneal.anneal_alpha(epoch, 0.5);
        assert!(a >= prev);
        prev = a;
    }
    assert_eq!(anneal.anneal_alpha(60.0, 0.5), 1.0);
}

fn random<'g>(g: &'g Graph<f64>, rng: &mut RngStream, shape: &[usize]) -> dearkd_core::Var<'g, f64> {
    g.constant(Tensor::from_fn(shape, |_| rng.normal()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_loss_signs(seed in any::<u64>(), margin in 0.0f64..3.0) {
        let mut rng = RngStream::new(seed);
        let classes = 2 + rng.below(2);
        let per = 2 + rng.below(3);
        let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per)).collect();
        let g = Graph::new();
        let e = random(&g, &mut rng, &[labels.len(), 3]);
        prop_assert!(triplet_loss(e, &labels, margin).unwrap().item() >= 0.0);
        prop_assert!(ep_loss(e, &labels).unwrap().item() <= 0.0);
        let collapsed = g.constant(Tensor::zeros(&[labels.len(), 3]));
        prop_assert!((triplet_loss(collapsed, &labels, margin).unwrap().item() - margin).abs() <= 1e-12);
        prop_assert_eq!(ep_loss(collapsed, &labels).unwrap().item(), 0.0);
    }

    #[test]
    fn bn_reg_ignores_layer_order_and_detects_mismatch(seed in any::<u64>(), layers in 1usize..5) {
        let mut rng = RngStream::new(seed);
        let g = Graph::new();
        let mut batch = Vec::new();
        let mut running = Vec::new();
        for _ in 0..layers {
            let c = 1 + rng.below(4);
            batch.push(BatchNormStats { mean: random(&g, &mut rng, &[c]), var: random(&g, &mut rng, &[c]) });
            running.push((Tensor::from_fn(&[c], |_| rng.normal()), Tensor::from_fn(&[c], |_| rng.normal())));
        }
        let base = bn_reg(&batch, &running).unwrap().item();
        prop_assert!(base > 0.0);
        let mut order: Vec<usize> = (0..layers).collect();
        rng.shuffle(&mut order);
        let pb: Vec<_> = order.iter().map(|&k| BatchNormStats { mean: batch[k].mean, var: batch[k].var }).collect();
        let pr: Vec<_> = order.iter().map(|&k| running[k].clone()).collect();
        prop_assert!((bn_reg(&pb, &pr).unwrap().item() - base).abs() <= 1e-12 * base.max(1.0));
        let matched: Vec<_> = batch.iter().map(|s| ((*s.mean.value()).clone(), (*s.var.value()).clone())).collect();
        prop_assert_eq!(bn_reg(&batch, &matched).unwrap().item(), 0.0);
    }

    #[test]
    fn hidden_loss_is_nonnegative_and_zero_on_match(seed in any::<u64>(), taps in 1usize..4) {
        let mut rng = RngStream::new(seed);
        let g = Graph::new();
        let a: Vec<_> = (0..taps).map(|_| random(&g, &mut rng, &[2, 3, 3, 4])).collect();
        let t: Vec<_> = (0..taps).map(|_| random(&g, &mut rng, &[2, 3, 3, 4])).collect();
        prop_assert!(hidden_loss(&a, &t).unwrap().item() > 0.0);
        prop_assert_eq!(hidden_loss(&a, &a).unwrap().item(), 0.0);
    }

    #[test]
    fn stage1_is_an_affine_combination(seed in any::<u64>(), alpha in 0.0f64..1.0, beta in 0.0f64..2.0, eps in -1.0f64..1.0) {
        let mut rng = RngStream::new(seed);
        let g = Graph::new();
        let labels = vec![rng.below(4), rng.below(4), rng.below(4)];
        let student = StudentOutput {
            cls_logits: random(&g, &mut rng, &[3, 4]),
            pooled_logits: random(&g, &mut rng, &[3, 4]),
            hidden: vec![],
            attn: vec![],
        };
        let aligned = vec![random(&g, &mut rng, &[3, 2, 2, 5])];
        let teacher = TeacherSignal { logits: Tensor::from_fn(&[3, 4], |_| rng.normal()), taps: vec![random(&g, &mut rng, &[3, 2, 2, 5])] };
        let w = LossWeights { alpha, beta };
        let out = stage1_loss(&student, &aligned, Some(&teacher), &labels, w).unwrap();
        let want = alpha * out.ce + (1.0 - alpha) * out.logit + beta * out.hidden;
        prop_assert!((out.total.item() - want).abs() <= 1e-12);
        // Shift the CE component by eps: add eps to the target logit of every
        // row and subtract the matching log-partition change.
        let ce0 = student.cls_logits.cross_entropy(&labels).unwrap().item();
        let shifted = StudentOutput { cls_logits: student.cls_logits.add_scalar(eps), ..student };
        let again = stage1_loss(&shifted, &aligned, Some(&teacher), &labels, w).unwrap();
        prop_assert!((again.ce - ce0).abs() <= 1e-12);
        prop_assert!((again.total.item() - out.total.item()).abs() <= 1e-12);
        // Perturbing the hidden component by a known amount.
        let delta = g.constant(Tensor::full(&[3, 2, 2, 5], eps));
        let moved = vec![aligned[0].add(delta).unwrap()];
        let m = stage1_loss(&shifted, &moved, Some(&teacher), &labels, w).unwrap();
        prop_assert!((m.total.item() - out.total.item() - beta * (m.hidden - out.hidden)).abs() <= 1e-12);
    }
}
