use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A collection of named parameter tensors in a fixed order.
pub trait ParamTensors {
    fn tensor_names(&self) -> Vec<String>;
    fn tensor(&self, idx: usize) -> &Tensor;
    fn tensor_mut(&mut self, idx: usize) -> &mut Tensor;

    fn tensor_count(&self) -> usize {
        self.tensor_names().len()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst entry as (tensor name, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
    /// Max relative error per tensor, in parameter order.
    pub per_tensor: Vec<(String, f64)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    /// Name of the tensor holding the worst entry.
    pub fn worst_group(&self) -> Option<&str> {
        self.worst.as_ref().map(|w| w.0.as_str())
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `loss_fn` with central
/// differences of its value, entry by entry.
///
/// `loss_fn` returns the loss and one gradient vector per tensor (in
/// `ParamTensors` order). It must be deterministic. Parameters are restored
/// to their original values before returning.
pub fn grad_check<P, F>(params: &mut P, step: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    P: ParamTensors,
    F: FnMut(&P) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step {step} must be positive")));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss} at the check point")));
    }
    let names = params.tensor_names();
    if analytic.len() != names.len() {
        return Err(Error::dim(format!(
            "{} gradient tensors for {} parameters",
            analytic.len(),
            names.len()
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_tensor: Vec::with_capacity(names.len()),
        entries_checked: 0,
    };
    for (t, name) in names.iter().enumerate() {
        let n = params.tensor(t).len();
        if analytic[t].len() != n {
            return Err(Error::dim(format!(
                "gradient for {name} has {} entries, parameter has {n}",
                analytic[t].len()
            )));
        }
        let mut tensor_max = 0.0f64;
        for (k, &a) in analytic[t].iter().enumerate() {
            let orig = params.tensor(t).data()[k];
            params.tensor_mut(t).data_mut()[k] = orig + step;
            let plus = loss_fn(params).map(|r| r.0);
            params.tensor_mut(t).data_mut()[k] = orig - step;
            let minus = loss_fn(params).map(|r| r.0);
            params.tensor_mut(t).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite perturbing {name}[{k}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(a, numeric);
            tensor_max = tensor_max.max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((name.clone(), k, a, numeric));
            }
            report.entries_checked += 1;
        }
        report.per_tensor.push((name.clone(), tensor_max));
    }
    Ok(report)
}
