//! Finite-difference gradient verification. The function under test
//! rebuilds its tape from a map of input tensors on every call, so central
//! differences simply perturb the map and re-evaluate.

use super::tensor::Tensor;
use crate::error::Result;
use std::collections::BTreeMap;

/// Result of checking one input tensor.
#[derive(Debug)]
pub struct GradCheckReport {
    /// max over elements of |analytic − numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel_err: f64,
    pub worst_input: String,
}

/// Compare analytic gradients against central finite differences.
///
/// `f` maps named inputs to (scalar loss value, gradients per input name).
/// Returns the worst relative error across all elements of all inputs.
pub fn grad_check<F>(
    f: F,
    inputs: &BTreeMap<String, Tensor>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<(f64, BTreeMap<String, Tensor>)>,
{
    let (_, analytic) = f(inputs)?;
    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: String::new(),
    };
    for (name, tensor) in inputs {
        let a = analytic
            .get(name)
            .ok_or_else(|| crate::error::Error::Invalid(format!("no gradient for {name}")))?;
        for i in 0..tensor.len() {
            let mut plus = inputs.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let (fp, _) = f(&plus)?;
            let mut minus = inputs.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            let (fm, _) = f(&minus)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic_i = a.data()[i];
            let rel = (analytic_i - numeric).abs()
                / f64::max(1e-8, analytic_i.abs() + numeric.abs());
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_input = format!("{name}[{i}]");
            }
        }
    }
    Ok(worst)
}
