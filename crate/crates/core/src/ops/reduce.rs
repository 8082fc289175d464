//! Sums, means and Euclidean norms.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::normalize_axis;
use crate::element::Element;
use crate::error::Result;
use crate::graph::Var;
use crate::tensor::Tensor;

impl<'g, T: Element> Var<'g, T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'g, T> {
        let xv = self.value();
        let s: T = xv.data().iter().copied().sum();
        let shape = xv.shape().to_vec();
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| vec![Some(Tensor::full(&shape, g.item()))]);
        self.graph().push_op(Tensor::scalar(s), &[self], backward)
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sum over one axis. With `keepdim` the axis stays with extent 1.
    pub fn sum_axis(self, axis: isize, keepdim: bool) -> Result<Var<'g, T>> {
        let xv = self.value();
        let ax = normalize_axis("sum_axis", axis, xv.rank())?;
        let shape = xv.shape().to_vec();
        let outer: usize = shape[..ax].iter().product();
        let ext = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let xd = xv.data();
        for o in 0..outer {
            for e in 0..ext {
                let src = &xd[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[ax] = 1;
        } else {
            out_shape.remove(ax);
        }
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            let gd = g.data();
            let mut gx = Vec::with_capacity(outer * ext * inner);
            for o in 0..outer {
                for _ in 0..ext {
                    gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        });
        Ok(self.graph().push_op(Tensor::from_parts(out_shape, out), &[self], backward))
    }

    pub fn mean_axis(self, axis: isize, keepdim: bool) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let ax = normalize_axis("mean_axis", axis, shape.len())?;
        let n = T::lit(shape[ax] as f64);
        Ok(self.sum_axis(axis, keepdim)?.scale(T::one() / n))
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken
    /// as zero.
    pub fn l2_norm(self) -> Var<'g, T> {
        let n = self.value().numel();
        self.reshape(&[1, n]).expect("flat reshape").l2_norm_rows().reshape(&[]).expect("scalar reshape")
    }

    /// Euclidean norm over the last axis; the axis is removed.
    pub fn l2_norm_rows(self) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let width = *shape.last().unwrap_or(&1);
        let norms: Vec<T> = xv.data().chunks(width).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let mut out_shape = shape.clone();
        out_shape.pop();
        let out = Tensor::from_parts(out_shape, norms.clone());
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            let mut gx = Vec::with_capacity(xv.numel());
            for ((row, &n), &gr) in xv.data().chunks(width).zip(&norms).zip(g.data()) {
                if n > T::zero() {
                    gx.extend(row.iter().map(|&v| gr * v / n));
                } else {
                    gx.extend(core::iter::repeat_n(T::zero(), width));
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        });
        self.graph().push_op(out, &[self], backward)
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn l2_norm_three_four_five() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        assert_eq!(x.l2_norm().item(), 5.0);
    }

    #[test]
    fn mean_of_one_two_three() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        assert_eq!(x.mean().item(), 2.0);
    }

    #[test]
    fn sum_grad_is_ones() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let grads = g.backward(x.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn sum_axis_keepdim() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = x.sum_axis(1, true).unwrap();
        assert_eq!(s.shape(), vec![2, 1]);
        assert_eq!(s.value().data(), &[3.0, 12.0]);
        let s0 = x.sum_axis(0, false).unwrap();
        assert_eq!(s0.value().data(), &[3.0, 5.0, 7.0]);
    }
}
