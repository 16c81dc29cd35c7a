use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compare the analytic gradient returned by `f` at `point` against central differences.
///
/// `f` returns the scalar value and its analytic gradient.
pub fn grad_check<F>(f: F, point: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(point)?;
    let mut x = point.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None };
    for i in 0..point.len() {
        x[i] = point[i] + eps;
        let (fp, _) = f(&x)?;
        x[i] = point[i] - eps;
        let (fm, _) = f(&x)?;
        x[i] = point[i];
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst_index = Some(i);
            }
        }
    }
    Ok(report)
}
