use dearkd_core::ops::{conv2d_tensor, softmax_rows, Conv2dSpec};
use dearkd_core::{Graph, RngStream, Tensor};
use proptest::prelude::*;

fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, spec: Conv2dSpec) -> Tensor<f64> {
    let (b, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, cpg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let opg = c_out / spec.groups;
    let oh = (h + 2 * spec.pad - k) / spec.stride + 1;
    let ow = (wd + 2 * spec.pad - k) / spec.stride + 1;
    let mut out = Tensor::zeros(&[b, c_out, oh, ow]);
    for n in 0..b {
        for o in 0..c_out {
            let g = o / opg;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for c in 0..cpg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (i * spec.stride + ky) as isize - spec.pad as isize;
                                let xx = (j * spec.stride + kx) as isize - spec.pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[o, c, ky, kx]) * x.at(&[n, g * cpg + c, y as usize, xx as usize]);
                            }
                        }
                    }
                    out.data_mut()[((n * c_out + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    let _ = c_in;
    out
}

fn int_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.below(9) as f64 - 4.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, shift in -50.0f64..50.0) {
        let mut rng = RngStream::new(seed);
        let x = Tensor::<f64>::from_fn(&[rows, cols], |_| 5.0 * rng.normal());
        let p = softmax_rows(&x);
        let p32 = softmax_rows(&x.cast::<f32>());
        for r in 0..rows {
            let s: f64 = p.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            let s32: f32 = p32.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s32 - 1.0).abs() <= 1e-6);
        }
        let g = Graph::new();
        let tape = g.constant(x.clone()).softmax(-1).unwrap().value();
        let shifted = g.constant(x.map(|v| v + shift)).softmax(-1).unwrap().value();
        prop_assert!(tape.max_abs_diff(&shifted) <= 1e-9);
        prop_assert!(tape.max_abs_diff(&p) <= 1e-15);
    }

    // Integer-valued data makes every partial sum exact, so any summation
    // order must agree bit for bit.
    #[test]
    fn conv2d_equals_brute_force(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let groups = 1 + rng.below(2);
        let c_in = groups * (1 + rng.below(3));
        let c_out = groups * (1 + rng.below(3));
        let k = [1, 3, 5][rng.below(3)];
        let spec = Conv2dSpec { stride: 1 + rng.below(2), pad: rng.below(k / 2 + 1), groups };
        let (h, w) = (k + rng.below(5), k + rng.below(5));
        let batch = 1 + rng.below(2);
        let x = int_tensor(&mut rng, &[batch, c_in, h, w]);
        let wt = int_tensor(&mut rng, &[c_out, c_in / groups, k, k]);
        let bias = int_tensor(&mut rng, &[c_out]);
        let fast = conv2d_tensor(&x, &wt, Some(&bias), spec).unwrap();
        prop_assert_eq!(fast, brute_conv(&x, &wt, Some(&bias), spec));
        let g = Graph::new();
        let tape = g.constant(x.clone()).conv2d(g.constant(wt.clone()), None, spec).unwrap().value();
        prop_assert_eq!(&*tape, &brute_conv(&x, &wt, None, spec));
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = RngStream::new(7);
        let x = Tensor::<f32>::from_fn(&[2, 3, 6, 6], |_| rng.normal() as f32);
        let w = Tensor::<f32>::from_fn(&[4, 3, 3, 3], |_| rng.normal() as f32);
        let g = Graph::new();
        let y = g.constant(x).conv2d(g.constant(w), None, Conv2dSpec::same(3)).unwrap();
        let mut drop_rng = RngStream::new(11);
        let out = y.gelu().dropout(0.2, &mut drop_rng, true).unwrap().softmax(-1).unwrap();
        (*out.value()).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn rng_streams_are_reproducible() {
    let draw = |seed| {
        let mut r = RngStream::derive(seed, 3);
        (0..16).map(|_| r.next_u64()).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}
