//! Central-difference gradient checking.

use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Worst entry of one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose relative error reaches the tolerance.
    pub failing_entries: usize,
    /// Largest `|a − n|` among failing entries.
    pub failing_max_abs_error: f64,
    /// Largest `|a|` among failing entries.
    pub failing_max_analytic: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub evaluations: usize,
    pub failing_entries: usize,
    pub failing_max_abs_error: f64,
    pub failing_max_analytic: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` for every entry of
/// every tensor in `params`.
///
/// `params` is perturbed in place one entry at a time and restored to its
/// exact original bits afterwards. `names` labels the tensors in the report
/// and may be shorter than `params`.
pub fn grad_check<F>(
    params: &mut [Tensor],
    analytic: &[Tensor],
    names: &[String],
    config: GradCheckConfig,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    assert_eq!(
        params.len(),
        analytic.len(),
        "one analytic gradient per parameter"
    );
    let h = config.step;
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        tolerance: config.tolerance,
        evaluations: 0,
        failing_entries: 0,
        failing_max_abs_error: 0.0,
        failing_max_analytic: 0.0,
        passed: true,
    };
    for k in 0..params.len() {
        assert!(
            params[k].same_shape(&analytic[k]),
            "gradient shape mismatch"
        );
        let mut check = ParamCheck {
            name: names.get(k).cloned().unwrap_or_else(|| format!("param{k}")),
            entries: params[k].len(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
            failing_entries: 0,
            failing_max_abs_error: 0.0,
            failing_max_analytic: 0.0,
            passed: true,
        };
        for e in 0..params[k].len() {
            let original = params[k].data()[e];
            params[k].data_mut()[e] = original + h;
            let plus = loss(params)?;
            params[k].data_mut()[e] = original - h;
            let minus = loss(params)?;
            params[k].data_mut()[e] = original;
            report.evaluations += 2;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[e];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || e == 0 {
                check.max_rel_error = err;
                check.worst_entry = e;
                check.analytic = a;
                check.numeric = numeric;
            }
            if err >= config.tolerance {
                check.failing_entries += 1;
                check.failing_max_abs_error = check.failing_max_abs_error.max((a - numeric).abs());
                check.failing_max_analytic = check.failing_max_analytic.max(a.abs());
            }
        }
        check.passed = check.max_rel_error < config.tolerance;
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.passed &= check.passed;
        report.failing_entries += check.failing_entries;
        report.failing_max_abs_error = report
            .failing_max_abs_error
            .max(check.failing_max_abs_error);
        report.failing_max_analytic = report.failing_max_analytic.max(check.failing_max_analytic);
        report.params.push(check);
    }
    Ok(report)
}
