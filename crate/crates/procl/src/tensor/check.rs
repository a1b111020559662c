//! Central-difference validation of reverse-mode gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Compares the tape gradient of a scalar function against central finite
/// differences at `point`, one coordinate at a time.
///
/// `build` receives the graph plus the node ids of the named point tensors
/// and must return the scalar output node. Returns the maximum over all
/// coordinates of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(build: F, point: &[(String, Tensor)], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("grad_check: step must be > 0".into()));
    }
    let mut graph = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, tensor) in point {
        let id = graph.input(name, tensor.clone())?;
        ids.insert(name.clone(), id);
    }
    let output = build(&mut graph, &ids)?;
    if graph.value(output).numel() != 1 {
        return Err(Error::shape("grad_check", "output must be scalar"));
    }
    let analytic = graph.backward(output)?;

    let mut max_rel = 0.0f64;
    for (name, tensor) in point {
        let grad = analytic
            .get(name)
            .expect("named input always present in gradient map");
        for i in 0..tensor.numel() {
            let mut plus = tensor.clone();
            plus.data_mut()[i] += step;
            graph.forward_eval(&[(name, plus)])?;
            let f_plus = graph.value(output).item()?;

            let mut minus = tensor.clone();
            minus.data_mut()[i] -= step;
            graph.forward_eval(&[(name, minus)])?;
            let f_minus = graph.value(output).item()?;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::non_finite(format!(
                    "grad_check: f at perturbed {name}[{i}]"
                )));
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        // restore the unperturbed binding before moving to the next tensor
        graph.forward_eval(&[(name, tensor.clone())])?;
    }
    Ok(max_rel)
}
