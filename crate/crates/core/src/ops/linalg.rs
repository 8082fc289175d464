//! Batched matrix product.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::elementwise::broadcast_shape;
use crate::element::{gemm, Element, MatView};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::{numel, Tensor};

/// Maps a flat index over the broadcast batch shape to a flat index over one
/// operand's own batch shape.
fn batch_map(own: &[usize], out: &[usize]) -> Vec<usize> {
    let total = numel(out);
    let offset = out.len() - own.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        let mut flat = 0;
        for (i, &o) in own.iter().enumerate() {
            let ix = if o == 1 { 0 } else { idx[i + offset] };
            flat = flat * o + ix;
        }
        map.push(flat);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

impl<'g, T: Element> Var<'g, T> {
    /// `[.., m, k] x [.., k, n] -> [.., m, n]` with broadcast batch axes.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let (av, bv) = (self.value(), rhs.value());
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape("matmul", batch_a, batch_b).map_err(|_| Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() })?;
        let map_a = batch_map(batch_a, &batch);
        let map_b = batch_map(batch_b, &batch);
        let nb = map_a.len();
        let mut out = vec![T::zero(); nb * m * n];
        for (bi, (&ia, &ib)) in map_a.iter().zip(&map_b).enumerate() {
            gemm(
                T::one(),
                MatView::row_major(&av.data()[ia * m * k..(ia + 1) * m * k], m, k),
                MatView::row_major(&bv.data()[ib * k * n..(ib + 1) * k * n], k, n),
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        let backward = Box::new(move |g: &Tensor<T>, need: &[bool]| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut ga = vec![T::zero(); av.numel()];
                for (bi, (&ia, &ib)) in map_a.iter().zip(&map_b).enumerate() {
                    // dA = dC B^T, accumulated when A is broadcast.
                    gemm(
                        T::one(),
                        MatView::row_major(&gd[bi * m * n..(bi + 1) * m * n], m, n),
                        MatView::transposed(&bv.data()[ib * k * n..(ib + 1) * k * n], k, n),
                        T::one(),
                        &mut ga[ia * m * k..(ia + 1) * m * k],
                    );
                }
                Tensor::from_parts(av.shape().to_vec(), ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![T::zero(); bv.numel()];
                for (bi, (&ia, &ib)) in map_a.iter().zip(&map_b).enumerate() {
                    // dB = A^T dC
                    gemm(
                        T::one(),
                        MatView::transposed(&av.data()[ia * m * k..(ia + 1) * m * k], m, k),
                        MatView::row_major(&gd[bi * m * n..(bi + 1) * m * n], m, n),
                        T::one(),
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                    );
                }
                Tensor::from_parts(bv.shape().to_vec(), gb)
            });
            vec![ga, gb]
        });
        Ok(self.graph().push_op(Tensor::from_parts(out_shape, out), &[self, rhs], backward))
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn identity_times_column() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.input(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn hand_multiplication() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.input(Tensor::from_f64(&[2, 1], &[5.0, 6.0]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let msg = alloc::format!("{}", a.matmul(b).unwrap_err());
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_batch() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let b = g.input(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().data(), a.value().data());
        let grads = g.backward(c.sum()).unwrap();
        // dB sums over the three broadcast batches.
        assert_eq!(grads.get(b).unwrap().shape(), &[2, 2]);
    }
}
