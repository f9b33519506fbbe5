use std::collections::BTreeMap;

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative discrepancy `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients against central differences
/// `(f(x+ε) − f(x−ε)) / 2ε` for every coordinate of every differentiable
/// input, returning the largest relative error.
pub fn grad_check(graph: &mut Graph, inputs: &BTreeMap<String, Tensor>, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    graph.forward(inputs)?;
    let analytic = graph.backward()?;
    let mut probe = inputs.clone();
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for k in 0..grad.len() {
            let base = inputs[name].data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = base + epsilon;
            let plus = graph.forward(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = base - epsilon;
            let minus = graph.forward(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = base;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    // leave the graph holding the unperturbed pass
    graph.forward(inputs)?;
    Ok(worst)
}
