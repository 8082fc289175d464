//! Classification and regression losses.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Row-wise argmax of `[B, C]` logits; ties go to the lowest index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax of `[B, C]` logits on plain tensors.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let c = *logits.shape().last().unwrap_or(&1);
    let rows = logits.numel() / c;
    let mut out = vec![T::zero(); logits.numel()];
    super::softmax::softmax_into(logits.data(), &mut out, rows, c, 1);
    Tensor::from_parts(logits.shape().to_vec(), out)
}

impl<'g, T: Element> Var<'g, T> {
    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'g, T>> {
        let lv = self.value();
        let shape = lv.shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::ShapeMismatch { op: "cross_entropy", lhs: shape, rhs: vec![targets.len()] });
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TargetOutOfRange { target: bad, classes: c });
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        let probs = softmax_rows(&lv);
        let mut loss = T::zero();
        for (&t, lrow) in targets.iter().zip(lv.data().chunks(c)) {
            // log-sum-exp form avoids log(0) for saturated rows.
            let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + lrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - lrow[t];
        }
        let bn = T::lit(b as f64);
        loss /= bn;
        drop(lv);
        let targets = targets.to_vec();
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            let k = g.item() / bn;
            let mut gx = probs.data().to_vec();
            for (row, &t) in gx.chunks_mut(c).zip(&targets) {
                row[t] -= T::one();
                for v in row.iter_mut() {
                    *v *= k;
                }
            }
            vec![Some(Tensor::from_parts(vec![b, c], gx))]
        });
        Ok(self.graph().push_op(Tensor::scalar(loss), &[self], backward))
    }

    /// Mean of squared differences.
    pub fn mse(self, target: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.shape(), target.shape());
        if a != b {
            return Err(Error::ShapeMismatch { op: "mse", lhs: a, rhs: b });
        }
        Ok(self.sub(target)?.square().mean())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn uniform_logits_give_ln2() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2]));
        assert!((x.cross_entropy(&[0]).unwrap().item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[1, 2], &[20.0, -20.0]).unwrap());
        assert!(x.cross_entropy(&[0]).unwrap().item() < 1e-15);
    }

    #[test]
    fn out_of_range_target() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 2]));
        assert_eq!(x.cross_entropy(&[2]).unwrap_err(), Error::TargetOutOfRange { target: 2, classes: 2 });
    }

    #[test]
    fn mse_examples() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2]));
        let b = g.input(Tensor::from_f64(&[2], &[1.0, 3.0]).unwrap());
        assert_eq!(a.mse(b).unwrap().item(), 5.0);
        assert_eq!(b.mse(a).unwrap().item(), 5.0);
        assert_eq!(b.mse(b).unwrap().item(), 0.0);
        assert!(a.mse(g.input(Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn argmax_tie_goes_low() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
