//! Central finite-difference gradient checking.
//!
//! The checker only ever calls [`ComputeGraph::forward`], so it stays
//! independent of the reverse-mode path it is used to validate. Differences
//! are formed in `f64` to keep the quotient itself from adding noise; the
//! forward values are still plain `f32` results.

use crate::error::Result;
use crate::graph::{Bindings, ComputeGraph};
use crate::tensor::Tensor;

/// Default step used throughout the test suites.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Relative error of `analytic` against `numeric`, with a small floor so
/// that near-zero pairs (where forward rounding dominates the quotient)
/// compare on an absolute scale instead.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(0.1);
    (analytic - numeric).abs() / denom
}

/// Max relative error between the graph's analytic gradient and central
/// finite differences over every element of every `wrt` leaf.
pub fn max_gradient_error(
    graph: &ComputeGraph,
    bindings: &Bindings,
    wrt: &[&str],
    step: f64,
) -> Result<f64> {
    let grads = graph.gradient(bindings, wrt)?;
    let mut worst = 0.0f64;
    for name in wrt {
        let base = &bindings[*name];
        let analytic = &grads[*name];
        for i in 0..base.numel() {
            let fd = central_difference(graph, bindings, name, i, step)?;
            let err = relative_error(analytic.data()[i] as f64, fd);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// d(output)/d(bindings[name][index]) by central differences.
pub fn central_difference(
    graph: &ComputeGraph,
    bindings: &Bindings,
    name: &str,
    index: usize,
    step: f64,
) -> Result<f64> {
    let plus = forward_with_nudge(graph, bindings, name, index, step as f32)?;
    let minus = forward_with_nudge(graph, bindings, name, index, -step as f32)?;
    Ok((plus as f64 - minus as f64) / (2.0 * step))
}

fn forward_with_nudge(
    graph: &ComputeGraph,
    bindings: &Bindings,
    name: &str,
    index: usize,
    delta: f32,
) -> Result<f32> {
    let mut nudged = bindings.clone();
    let base = &bindings[name];
    let mut data = base.data().to_vec();
    data[index] += delta;
    nudged.insert(name.to_string(), Tensor::new(base.shape().to_vec(), data)?);
    graph.forward(&nudged)?.item()
}
