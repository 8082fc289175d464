//! Central finite-difference gradient oracle.

pub mod suite;

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Result of one [`grad_check`] run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Worst per-coordinate relative error.
    pub max_rel_err: f64,
    /// Worst per-coordinate absolute error.
    pub max_abs_err: f64,
    pub coordinates: usize,
    /// Coordinates that needed a smaller step.
    pub refined: usize,
}

/// Relative error that triggers a smaller-step re-measurement.
pub const REFINE_ABOVE: f64 = 1e-6;
/// Maximum number of step reductions per coordinate.
pub const REFINE_ROUNDS: usize = 2;

/// Compares the tape gradient of a scalar function with central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` at every input coordinate.
///
/// The relative error at a coordinate is `|analytic - numeric| / d` with
/// `d = max(|analytic|, |numeric|, 1e-3 * G)`, where `G` is the largest
/// analytic gradient magnitude over all inputs; the floor keeps coordinates
/// whose true gradient is (near) zero from dividing by rounding noise.
///
/// Piecewise-linear ops (ReLU) make the central difference wrong whenever
/// the step straddles a kink. A coordinate whose error exceeds
/// [`REFINE_ABOVE`] is re-measured with the step shrunk by 100x, up to
/// [`REFINE_ROUNDS`] times, and keeps its smallest error. A wrong analytic
/// gradient disagrees at every step size, so this only removes kink
/// crossings.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter().zip(inputs).map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect()
    };
    let eval = |args: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = args.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };
    let scale = analytic.iter().flat_map(|t| t.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, coordinates: 0, refined: 0 };
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let x0 = input.data()[i];
            let a = analytic[k].data()[i];
            let mut h = eps;
            let mut best: Option<(f64, f64)> = None;
            for round in 0..=REFINE_ROUNDS {
                work[k].data_mut()[i] = x0 + h;
                let up = eval(&work)?;
                work[k].data_mut()[i] = x0 - h;
                let down = eval(&work)?;
                work[k].data_mut()[i] = x0;
                let numeric = (up - down) / (2.0 * h);
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(floor);
                if best.is_none_or(|(r, _)| rel < r) {
                    best = Some((rel, abs));
                }
                if rel <= REFINE_ABOVE {
                    break;
                }
                if round == 0 {
                    report.refined += 1;
                }
                h *= 1e-2;
            }
            let (rel, abs) = best.expect("at least one round");
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Random projection weights so a tensor-valued op reduces to a scalar whose
/// gradient exercises every output coordinate.
pub fn projection<'g>(graph: &'g Graph<f64>, out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = crate::rng::RngStream::derive(seed, 0x70);
    let shape = out.shape();
    let w = Tensor::from_fn(&shape, |_| rng.uniform_range(-1.0, 1.0));
    Ok(out.mul(graph.constant(w))?.sum())
}
