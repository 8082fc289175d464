//! Layout ops: reshape, permute, concat, slice, row gather.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::normalize_axis;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::{numel, Tensor};

pub(crate) fn permute_tensor<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let rank = x.rank();
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let xd = x.data();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.push(xd[0]);
        return Tensor::from_parts(out_shape, out);
    }
    // Innermost axis copied in a tight loop.
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let outer = total / inner;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&xd[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| xd[base + i * inner_stride]));
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl<'g, T: Element> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let xv = self.value();
        let out = xv.reshape(shape)?;
        let in_shape = xv.shape().to_vec();
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| vec![Some(g.reshape(&in_shape).unwrap())]);
        Ok(self.graph().push_op(out, &[self], backward))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let xv = self.value();
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape { op: "permute", shape: xv.shape().to_vec(), reason: format!("{perm:?} is not a permutation of the axes") });
        }
        let out = permute_tensor(&xv, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| vec![Some(permute_tensor(g, &inverse))]);
        Ok(self.graph().push_op(out, &[self], backward))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::InvalidShape { op: "transpose_last", shape: self.shape(), reason: "rank < 2".into() });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: isize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let xv = self.value();
        let axis = normalize_axis("slice", axis, xv.rank())?;
        let ext = xv.shape()[axis];
        if len == 0 || start + len > ext {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: xv.shape().to_vec(),
                reason: format!("range {start}..{} exceeds extent {ext} of axis {axis}", start + len),
            });
        }
        let (outer, inner) = outer_inner(xv.shape(), axis);
        let mut out_shape = xv.shape().to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let in_shape = xv.shape().to_vec();
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            let mut gx = vec![T::zero(); numel(&in_shape)];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        });
        Ok(self.graph().push_op(Tensor::from_parts(out_shape, out), &[self], backward))
    }

    /// Gathers entries of axis 0; indices may repeat.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let xv = self.value();
        if xv.rank() == 0 || indices.is_empty() {
            return Err(Error::InvalidShape { op: "index_select", shape: xv.shape().to_vec(), reason: "need rank >= 1 and indices".into() });
        }
        let rows = xv.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape { op: "index_select", shape: xv.shape().to_vec(), reason: format!("index {bad} out of range") });
        }
        let row = xv.numel() / rows;
        let mut out_shape = xv.shape().to_vec();
        out_shape[0] = indices.len();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&xv.data()[i * row..(i + 1) * row]);
        }
        let in_shape = xv.shape().to_vec();
        let indices = indices.to_vec();
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            let mut gx = vec![T::zero(); numel(&in_shape)];
            for (k, &i) in indices.iter().enumerate() {
                for (dst, &src) in gx[i * row..(i + 1) * row].iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
                    *dst += src;
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        });
        Ok(self.graph().push_op(Tensor::from_parts(out_shape, out), &[self], backward))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g, T: Element>(parts: &[Var<'g, T>], axis: isize) -> Result<Var<'g, T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape { op: "concat", shape: Vec::new(), reason: "no inputs".into() })?;
    let graph = first.graph();
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let rank = values[0].rank();
    let axis = normalize_axis("concat", axis, rank)?;
    for v in &values[1..] {
        let compatible = v.rank() == rank && v.shape().iter().zip(values[0].shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch { op: "concat", lhs: values[0].shape().to_vec(), rhs: v.shape().to_vec() });
        }
    }
    let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let (outer, inner) = outer_inner(values[0].shape(), axis);
    let total_ext: usize = extents.iter().sum();
    let mut out_shape = values[0].shape().to_vec();
    out_shape[axis] = total_ext;
    let mut out = Vec::with_capacity(outer * total_ext * inner);
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    drop(values);
    let backward = Box::new(move |g: &Tensor<T>, need: &[bool]| {
        let gd = g.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(shapes.len());
        for (k, (shape, &e)) in shapes.iter().zip(&extents).enumerate() {
            if need[k] {
                let mut gx = Vec::with_capacity(numel(shape));
                for o in 0..outer {
                    let base = (o * total_ext + offset) * inner;
                    gx.extend_from_slice(&gd[base..base + e * inner]);
                }
                grads.push(Some(Tensor::from_parts(shape.clone(), gx)));
            } else {
                grads.push(None);
            }
            offset += e;
        }
        grads
    });
    Ok(graph.push_op(Tensor::from_parts(out_shape, out), parts, backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn permute_matches_index_math() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let y = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = g.input(Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 3]);
        let back = c.slice(1, 1, 2).unwrap();
        assert_eq!(back.value().data(), b.value().data());
    }

    #[test]
    fn permute_rejects_non_permutation() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        assert!(a.permute(&[0, 0]).is_err());
    }
}
