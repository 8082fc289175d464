use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::rng::RngStream;
use crate::tensor::Tensor;

impl<'g, T: Element> Var<'g, T> {
    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`. Identity otherwise.
    pub fn dropout(self, p: f64, rng: &mut RngStream, training: bool) -> Result<Var<'g, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain { op: "dropout", detail: format!("p = {p} outside [0, 1)") });
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let xv = self.value();
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..xv.numel()).map(|_| if rng.uniform() < p { T::zero() } else { keep }).collect();
        Ok(self.apply_mask(Tensor::from_parts(xv.shape().to_vec(), mask)))
    }

    /// Multiplies by a fixed mask; the mask receives no gradient.
    pub fn apply_mask(self, mask: Tensor<T>) -> Var<'g, T> {
        let xv = self.value();
        assert_eq!(xv.shape(), mask.shape(), "mask shape");
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect());
        drop(xv);
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            vec![Some(Tensor::from_parts(g.shape().to_vec(), g.data().iter().zip(mask.data()).map(|(&g, &m)| g * m).collect()))]
        });
        self.graph().push_op(out, &[self], backward)
    }
}
