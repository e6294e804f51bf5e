//! Central-difference gradient checking.
//!
//! Analytic gradients from [`crate::tensor::Tape::backward`] are compared
//! against `(f(x+h) - f(x-h)) / 2h` entry by entry. Every differentiable op in
//! this crate is expected to pass at the tolerances below.

/// Step used for central differences.
pub const STEP: f64 = 1e-5;
/// Absolute tolerance floor for gradient comparisons.
pub const ABS_TOL: f64 = 1e-6;
/// Relative tolerance for gradient comparisons.
pub const REL_TOL: f64 = 1e-4;

/// Numeric gradient of `f` at `x` by central differences with step `step`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        out.push((hi - lo) / (2.0 * step));
    }
    out
}

/// Checks `|a - n| <= max(ABS_TOL, REL_TOL * max(|a|, |n|))` entrywise,
/// reporting the first offending entry.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!(
            "gradient length mismatch: {} vs {}",
            analytic.len(),
            numeric.len()
        ));
    }
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = ABS_TOL.max(REL_TOL * a.abs().max(n.abs()));
        if (a - n).abs() > tol {
            return Err(format!(
                "gradient mismatch at entry {i}: analytic {a}, numeric {n}, tol {tol}"
            ));
        }
    }
    Ok(())
}
