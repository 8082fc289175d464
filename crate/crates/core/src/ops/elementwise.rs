//! Broadcasting binary arithmetic and pointwise nonlinearities.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::{numel, strides_of, Tensor};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }),
        };
    }
    Ok(out)
}

/// Strides of `shape` read through the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out.len() - shape.len();
    (0..out.len()).map(|i| if i < offset || shape[i - offset] == 1 { 0 } else { own[i - offset] }).collect()
}

/// Calls `f(out_flat, a_flat, b_flat)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total = numel(out);
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Whether `small` (ignoring leading ones) is a trailing block of `big`.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let lead = small.iter().take_while(|&&d| d == 1).count();
        &small[lead..]
    };
    trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == *trimmed && small.len() <= big.len()
}

pub(crate) fn broadcast_binary<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    if out == a.shape() && is_suffix(b.shape(), a.shape()) {
        let period = b.numel();
        let bd = b.data();
        let data = a.data().chunks(period).flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    if out == b.shape() && is_suffix(a.shape(), b.shape()) {
        let period = a.numel();
        let ad = a.data();
        let data = b.data().chunks(period).flat_map(|chunk| ad.iter().zip(chunk).map(|(&x, &y)| f(x, y))).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums a broadcast gradient back down to `target` shape.
pub(crate) fn reduce_to<T: Element>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let n = numel(target);
    let mut out = vec![T::zero(); n];
    if is_suffix(target, grad.shape()) {
        for chunk in grad.data().chunks(n) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
    } else {
        let st = broadcast_strides(target, grad.shape());
        let zeros = vec![0; grad.rank()];
        let gd = grad.data();
        for_each_broadcast(grad.shape(), &st, &zeros, |o, t, _| out[t] += gd[o]);
    }
    Tensor::from_parts(target.to_vec(), out)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

// Fallible graph ops; the std operator traits cannot return `Result`.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Element> Var<'g, T> {
    fn binary(self, rhs: Var<'g, T>, kind: BinOp) -> Result<Var<'g, T>> {
        let (name, f): (&'static str, fn(T, T) -> T) = match kind {
            BinOp::Add => ("add", |x, y| x + y),
            BinOp::Sub => ("sub", |x, y| x - y),
            BinOp::Mul => ("mul", |x, y| x * y),
            BinOp::Div => ("div", |x, y| x / y),
        };
        let (av, bv) = (self.value(), rhs.value());
        let out = broadcast_binary(name, &av, &bv, f)?;
        let backward = Box::new(move |g: &Tensor<T>, need: &[bool]| {
            let ga = need[0].then(|| match kind {
                BinOp::Add | BinOp::Sub => reduce_to(g, av.shape()),
                BinOp::Mul => reduce_to(&broadcast_binary("mul", g, &bv, |x, y| x * y).unwrap(), av.shape()),
                BinOp::Div => reduce_to(&broadcast_binary("div", g, &bv, |x, y| x / y).unwrap(), av.shape()),
            });
            let gb = need[1].then(|| match kind {
                BinOp::Add => reduce_to(g, bv.shape()),
                BinOp::Sub => reduce_to(g, bv.shape()).map(|v| -v),
                BinOp::Mul => reduce_to(&broadcast_binary("mul", g, &av, |x, y| x * y).unwrap(), bv.shape()),
                BinOp::Div => {
                    let ga_over = broadcast_binary("div", g, &av, |x, y| x * y).unwrap();
                    let q = broadcast_binary("div", &ga_over, &bv, |x, y| -x / (y * y)).unwrap();
                    reduce_to(&q, bv.shape())
                }
            });
            vec![ga, gb]
        });
        Ok(self.graph().push_op(out, &[self, rhs], backward))
    }

    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Add)
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Sub)
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Mul)
    }

    pub fn div(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Div)
    }

    /// Pointwise op with a derivative expressed through input and output.
    fn unary(self, fwd: impl Fn(T) -> T, dfdx: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let xv = self.value();
        let out = xv.map(fwd);
        if !self.requires_grad() {
            return self.graph().push_op(out, &[self], Box::new(|_, _| vec![None]));
        }
        let yv = Rc::new(out.clone());
        let backward = Box::new(move |g: &Tensor<T>, _: &[bool]| {
            let data = g.data().iter().zip(xv.data().iter().zip(yv.data())).map(|(&g, (&x, &y))| g * dfdx(x, y)).collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        });
        self.graph().push_op(out, &[self], backward)
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(|x| if x > T::zero() { x } else { T::zero() }, |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g, T> {
        let c = T::lit((2.0 / core::f64::consts::PI).sqrt());
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        self.unary(
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + T::lit(3.0) * k * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            },
        )
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    /// `ln(1 + e^x)`, evaluated stably for large |x|.
    pub fn softplus(self) -> Var<'g, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn sqrt(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        if let Some(bad) = xv.data().iter().find(|v| **v < T::zero() || !v.is_finite()) {
            return Err(Error::Domain { op: "sqrt", detail: format!("input {bad}") });
        }
        Ok(self.unary(|x| x.sqrt(), |_, y| if y > T::zero() { T::lit(0.5) / y } else { T::zero() }))
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        let xv = self.value();
        if let Some(bad) = xv.data().iter().find(|v| **v <= T::zero() || !v.is_finite()) {
            return Err(Error::Domain { op: "log", detail: format!("input {bad}") });
        }
        Ok(self.unary(|x| x.ln(), |x, _| T::one() / x))
    }
}

pub fn softplus<T: Element>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse<T: Element>(y: T) -> T {
    if y > T::lit(30.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
