use std::collections::BTreeMap;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor of the relative error.
///
/// Central differences in f64 carry about `ulp(f) / h` of roundoff, which
/// is `2e-11` for a loss near 2 at `h = 1e-5`. A coordinate whose true
/// derivative is below `~1e-7` can therefore exceed a `1e-4` relative
/// tolerance even when the backward pass is exact; `max_abs_error` is the
/// figure to read in that case.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Worst `|a - n| / max(REL_FLOOR, |a| + |n|)` over all checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    /// Worst `|a - n|` over all checked coordinates.
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central differences with step `h * max(1, |theta_i|)`.
///
/// `f` receives a fresh graph and the (possibly perturbed) tensors, must
/// register each of them as a parameter under its key, and returns the loss
/// node. Keys without a gradient count as zero analytic gradient.
pub fn gradcheck<F>(params: &BTreeMap<String, Tensor<f64>>, h: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Tensor<f64>>) -> Result<Var>,
{
    let eval = |p: &BTreeMap<String, Tensor<f64>>| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        Ok((g, loss))
    };

    let (graph, loss) = eval(params)?;
    let analytic = graph.backward(loss)?;
    drop(graph);

    let mut work = params.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        max_abs_error: 0.0,
        coordinates: 0,
    };
    let names: Vec<String> = params.keys().cloned().collect();
    for name in &names {
        let zeros = Tensor::zeros(params[name].shape());
        let grad = analytic.get(name).unwrap_or(&zeros);
        for i in 0..grad.numel() {
            let theta = params[name].data()[i];
            let step = h * theta.abs().max(1.0);
            work.get_mut(name).unwrap().data_mut()[i] = theta + step;
            let (g, l) = eval(&work)?;
            let plus = g.value(l).item();
            work.get_mut(name).unwrap().data_mut()[i] = theta - step;
            let (g, l) = eval(&work)?;
            let minus = g.value(l).item();
            work.get_mut(name).unwrap().data_mut()[i] = theta;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
