//! Central-difference gradient auditing.

/// One named parameter block under audit.
#[derive(Debug, Clone)]
pub struct GradCheckParam {
    pub name: String,
    /// Current parameter values; perturbed in place during the scan.
    pub values: Vec<f64>,
    /// Analytic gradient for `values`, from a backward pass.
    pub analytic: Vec<f64>,
    /// Frozen parameters are excluded from the scan.
    pub frozen: bool,
}

impl GradCheckParam {
    pub fn new(name: impl Into<String>, values: Vec<f64>, analytic: Vec<f64>) -> Self {
        assert_eq!(values.len(), analytic.len(), "gradient length must match parameter length");
        GradCheckParam { name: name.into(), values, analytic, frozen: false }
    }

    pub fn frozen(name: impl Into<String>, values: Vec<f64>) -> Self {
        let analytic = vec![0.0; values.len()];
        GradCheckParam { name: name.into(), values, analytic, frozen: true }
    }
}

/// Result of a gradient audit.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `eval` must be a deterministic pure function of the parameter values.
/// Returns the maximum over all unfrozen coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// Panics if `eval` returns a non-finite value at any probe point.
pub fn grad_check<F>(mut eval: F, params: &mut [GradCheckParam], step: f64) -> GradCheckReport
where
    F: FnMut(&[GradCheckParam]) -> f64,
{
    assert!(step > 0.0, "grad_check requires a positive step");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
    };
    for p in 0..params.len() {
        if params[p].frozen {
            continue;
        }
        for i in 0..params[p].values.len() {
            let original = params[p].values[i];

            params[p].values[i] = original + step;
            let f_plus = eval(params);
            params[p].values[i] = original - step;
            let f_minus = eval(params);
            params[p].values[i] = original;

            assert!(
                f_plus.is_finite() && f_minus.is_finite(),
                "grad_check rejects non-finite function value at {}[{}]",
                params[p].name,
                i
            );

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let analytic = params[p].analytic[i];
            let rel = (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params[p].name.clone();
                report.worst_coord = i;
            }
        }
    }
    report
}
