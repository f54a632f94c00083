use super::TensorError;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&mut self, theta: &[f64]) -> Result<f64, TensorError>;
    fn value_and_grad(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>), TensorError>;
}

impl<V, G> Objective for (V, G)
where
    V: FnMut(&[f64]) -> Result<f64, TensorError>,
    G: FnMut(&[f64]) -> Result<(f64, Vec<f64>), TensorError>,
{
    fn value(&mut self, theta: &[f64]) -> Result<f64, TensorError> {
        (self.0)(theta)
    }

    fn value_and_grad(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>), TensorError> {
        (self.1)(theta)
    }
}

/// Denominator floor for the relative error, so coordinates with a
/// vanishing gradient are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares the analytic gradient against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` on every coordinate.
pub fn finite_diff_check<O: Objective>(
    obj: &mut O,
    params: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::InvalidArgument(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let (f0, grad) = obj.value_and_grad(params)?;
    let again = obj.value(params)?;
    if f0.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministicFunction { first: f0, second: again });
    }
    if grad.len() != params.len() {
        return Err(TensorError::ShapeMismatch(format!("{} gradients for {} parameters", grad.len(), params.len())));
    }

    let mut theta = params.to_vec();
    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0, passed: true };
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = obj.value(&theta)?;
        theta[i] = orig - h;
        let minus = obj.value(&theta)?;
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        if rel > report.max_rel_err || i == 0 {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
