use alloc::boxed::Box;
use alloc::vec;

use super::normalize_axis;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Max-subtracted softmax of every slice along `axis`, written into `out`.
pub(crate) fn softmax_into<T: Element>(x: &[T], out: &mut [T], outer: usize, ext: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| (o * ext + e) * inner + i;
            let mut max = T::neg_infinity();
            for e in 0..ext {
                max = max.max(x[at(e)]);
            }
            let mut total = T::zero();
            for e in 0..ext {
                let v = (x[at(e)] - max).exp();
                out[at(e)] = v;
                total += v;
            }
            for e in 0..ext {
                out[at(e)] /= total;
            }
        }
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn softmax(self, axis: isize) -> Result<Var<'g, T>> {
        let xv = self.value();
        let ax = normalize_axis("softmax", axis, xv.rank())?;
        if !xv.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let shape = xv.shape().to_vec();
        let outer: usize = shape[..ax].iter().product();
        let ext = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        let mut out = vec![T::zero(); xv.numel()];
        softmax_into(xv.data(), &mut out, outer, ext, inner);
        drop(xv);
        let yv = alloc::rc::Rc::new(Tensor::from_parts(shape.clone(), out));
        let y_saved = alloc::rc::Rc::clone(&yv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            // dx = y * (g - <g, y>) per slice.
            let (gd, yd) = (g.data(), y_saved.data());
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| (o * ext + e) * inner + i;
                    let mut dot = T::zero();
                    for e in 0..ext {
                        dot += gd[at(e)] * yd[at(e)];
                    }
                    for e in 0..ext {
                        gx[at(e)] = yd[at(e)] * (gd[at(e)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        });
        let value = alloc::rc::Rc::try_unwrap(yv).unwrap_or_else(|rc| (*rc).clone());
        Ok(self.graph().push_op(value, &[self], backward))
    }
}
