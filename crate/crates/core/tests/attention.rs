use dearkd_core::attention::{express_conv, image_to_tokens, relpos_score, tokens_to_image, Attention, AttentionConfig, AttentionKind};
use dearkd_core::ops::elementwise::softplus_inverse;
use dearkd_core::ops::{conv2d_tensor, Conv2dSpec};
use dearkd_core::{Graph, ParamStore, RngStream, Tensor};
use proptest::prelude::*;

fn mhca(grid: (usize, usize), heads: usize, has_cls: bool, seed: u64) -> (ParamStore<f64>, Attention<f64>) {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(heads, heads, grid, has_cls).unwrap();
    let layer = Attention::new(&mut store, "a", cfg, AttentionKind::Mhca, &mut RngStream::new(seed)).unwrap();
    (store, layer)
}

fn set_heads(store: &mut ParamStore<f64>, layer: &Attention<f64>, alpha: &[f64], centers: &[(f64, f64)]) {
    let rpe = layer.rpe.unwrap();
    let raw = Tensor::from_fn(&[alpha.len(), 1], |h| softplus_inverse(alpha[h]));
    store.set_value(rpe.alpha_raw, raw).unwrap();
    let c = Tensor::from_fn(&[centers.len(), 2], |i| if i % 2 == 0 { centers[i / 2].0 } else { centers[i / 2].1 });
    store.set_value(rpe.center, c).unwrap();
}

fn tape_scores(store: &ParamStore<f64>, layer: &Attention<f64>) -> Tensor<f64> {
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    let s = layer.position_scores(&b).unwrap().unwrap();

    (*s.value()).clone()
}

#[test]
fn quadratic_encoding_identity_is_exhaustive() {
    // A 4x4 grid realizes every offset in [-3, 3]^2; one head per center.
    let centers: Vec<(f64, f64)> = (-2..=2).flat_map(|a| (-2..=2).map(move |b| (a as f64, b as f64))).collect();
    for alpha in [0.5, 1.0, 2.0] {
        let (mut store, layer) = mhca((4, 4), centers.len(), false, 0);
        set_heads(&mut store, &layer, &vec![alpha; centers.len()], &centers);
        let scores = tape_scores(&store, &layer);
        let table = layer.table();
        let t = table.tokens();
        let mut seen = std::collections::BTreeSet::new();
        for (h, &(c1, c2)) in centers.iter().enumerate() {
            for i in 0..t {
                for j in 0..t {
                    let (d1, d2) = table.offset(i, j).unwrap();
                    seen.insert((d1, d2));
                    let (d1, d2) = (d1 as f64, d2 as f64);
                    let want = -alpha * ((d1 - c1).powi(2) + (d2 - c2).powi(2) - (c1 * c1 + c2 * c2));
                    let got = scores.data()[(h * t + i) * t + j];
                    assert!((got - want).abs() <= 1e-12, "alpha {alpha} center ({c1},{c2}) offset ({d1},{d2}): {got} vs {want}");
                    assert!((relpos_score((d1, d2), (c1, c2), alpha) - want).abs() <= 1e-12);
                }
            }
        }
        assert_eq!(seen.len(), 49);
    }
}

#[test]
fn cls_pairs_contribute_nothing() {
    let (store, layer) = mhca((3, 3), 2, true, 4);
    let s = tape_scores(&store, &layer);
    let t = 10;
    for h in 0..2 {
        for k in 0..t {
            assert_eq!(s.data()[(h * t) * t + k], 0.0);
            assert_eq!(s.data()[(h * t + k) * t], 0.0);
        }
    }
}

fn zero_content(store: &mut ParamStore<f64>, layer: &Attention<f64>) {
    for id in [layer.wq, layer.wk] {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn position_scores_are_translation_invariant(seed in any::<u64>(), rows in 2usize..6, cols in 2usize..6, ty in 0usize..3, tx in 0usize..3) {
        let (store, layer) = mhca((rows, cols), 3, false, seed);
        let s = tape_scores(&store, &layer);
        let t = rows * cols;
        let tok = |r: usize, c: usize| r * cols + c;
        for h in 0..3 {
            for i in 0..t {
                for j in 0..t {
                    let (ri, ci, rj, cj) = (i / cols + ty, i % cols + tx, j / cols + ty, j % cols + tx);
                    if ri >= rows || ci >= cols || rj >= rows || cj >= cols {
                        continue;
                    }
                    let a = s.data()[(h * t + i) * t + j];
                    let b = s.data()[(h * t + tok(ri, ci)) * t + tok(rj, cj)];
                    prop_assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn content_free_argmax_sits_at_nearest_offset(seed in any::<u64>(), alpha in 0.2f64..3.0, c1 in -2.4f64..2.4, c2 in -2.4f64..2.4) {
        let grid = (7, 7);
        let (mut store, layer) = mhca(grid, 1, false, seed);
        zero_content(&mut store, &layer);
        set_heads(&mut store, &layer, &[alpha], &[(c1, c2)]);
        let (n1, n2) = (c1.round() as isize, c2.round() as isize);
        prop_assume!((c1 - c1.trunc()).abs() != 0.5 && (c2 - c2.trunc()).abs() != 0.5);
        let g = Graph::new();
        let b = store.bind_frozen(&g);
        let mut rng = RngStream::new(seed);
        let x = g.constant(Tensor::from_fn(&[1, 49, 1], |_| rng.normal()));
        let a = layer.forward(&b, x, None).unwrap().attn.value();
        for i in 0..49 {
            let (r, c) = ((i / 7) as isize, (i % 7) as isize);
            let (tr, tc) = (r + n1, c + n2);
            if !(0..7).contains(&tr) || !(0..7).contains(&tc) {
                continue;
            }
            let row = &a.data()[i * 49..(i + 1) * 49];
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let arg = row.iter().enumerate().fold(0, |best, (k, v)| if *v > row[best] { k } else { best });
            prop_assert_eq!(arg, (tr * 7 + tc) as usize);
        }
    }

    #[test]
    fn express_conv_matches_conv2d_on_interior(seed in any::<u64>(), k in prop_oneof![Just(1usize), Just(3usize)], c_in in 1usize..5, c_out in 1usize..5) {
        let mut rng = RngStream::new(seed);
        let kernel = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.normal());
        let bias = Tensor::from_fn(&[c_out], |_| rng.normal());
        let img = Tensor::from_fn(&[2, c_in, 6, 6], |_| rng.normal());
        let err = conv_equivalence_error(&kernel, Some(&bias), &img, 50.0);
        prop_assert!(err <= 1e-4, "max error {err}");
    }
}

/// Max |MHCA - conv2d| over tokens whose full receptive field is in-grid.
fn conv_equivalence_error(kernel: &Tensor<f64>, bias: Option<&Tensor<f64>>, img: &Tensor<f64>, alpha: f64) -> f64 {
    let (h, w) = (img.shape()[2], img.shape()[3]);
    let k = kernel.shape()[2];
    let r = k / 2;
    let (store, layer) = express_conv(kernel, bias, alpha, (h, w)).unwrap();
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    let tokens = image_to_tokens(g.constant(img.clone())).unwrap();
    let out = layer.forward(&b, tokens, None).unwrap().output;
    let got = tokens_to_image(out, (h, w)).unwrap().value();
    let want = conv2d_tensor(img, kernel, bias, Conv2dSpec::same(k)).unwrap();
    let s = want.shape().to_vec();
    let mut err = 0.0f64;
    for n in 0..s[0] {
        for o in 0..s[1] {
            for i in r..h - r {
                for j in r..w - r {
                    let idx = [n, o, i, j];
                    err = err.max((got.at(&idx) - want.at(&idx)).abs());
                }
            }
        }
    }
    err
}

#[test]
fn express_conv_random_three_by_three() {
    let mut rng = RngStream::new(2);
    let kernel = Tensor::from_fn(&[4, 4, 3, 3], |_| rng.normal());
    let img = Tensor::from_fn(&[1, 4, 8, 8], |_| rng.normal());
    assert!(conv_equivalence_error(&kernel, None, &img, 50.0) <= 1e-4);
}

#[test]
fn express_conv_identity_kernel_reproduces_input() {
    let mut rng = RngStream::new(3);
    let kernel = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let img = Tensor::from_fn(&[2, 3, 5, 5], |_| rng.normal());
    let (store, layer) = express_conv(&kernel, None, 50.0, (5, 5)).unwrap();
    assert_eq!(layer.config.num_heads, 1);
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    let out = layer.forward(&b, image_to_tokens(g.constant(img.clone())).unwrap(), None).unwrap().output;
    let got = tokens_to_image(out, (5, 5)).unwrap().value();
    assert!(got.max_abs_diff(&img) <= 1e-15, "{}", got.max_abs_diff(&img));
}

#[test]
fn averaging_kernel_gives_neighbourhood_means() {
    let mut rng = RngStream::new(5);
    let kernel = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
    let img = Tensor::from_fn(&[1, 1, 6, 6], |_| rng.normal());
    let (store, layer) = express_conv(&kernel, None, 50.0, (6, 6)).unwrap();
    let g = Graph::new();
    let b = store.bind_frozen(&g);
    let out = layer.forward(&b, image_to_tokens(g.constant(img.clone())).unwrap(), None).unwrap().output;
    let got = tokens_to_image(out, (6, 6)).unwrap().value();
    for i in 1..5 {
        for j in 1..5 {
            let mut mean = 0.0;
            for di in 0..3 {
                for dj in 0..3 {
                    mean += img.at(&[0, 0, i + di - 1, j + dj - 1]) / 9.0;
                }
            }
            assert!((got.at(&[0, 0, i, j]) - mean).abs() <= 1e-4);
        }
    }
}
