//! Log-domain arithmetic helpers shared by the lattice losses.
//!
//! Zero probability is represented by the finite sentinel [`LOG_ZERO`] rather
//! than IEEE `-inf`, so lattice recursions never produce `inf - inf` NaNs.

/// Finite stand-in for `ln 0`. Small enough that `exp(LOG_ZERO)` underflows to
/// exactly `0.0`, large enough that sums of a few thousand of them stay finite.
pub const LOG_ZERO: f64 = -1.0e30;

/// `ln(exp(a) + exp(b))` with the usual max shift.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi <= LOG_ZERO {
        return LOG_ZERO;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln Σ exp(x)` over a slice; `LOG_ZERO` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if xs.is_empty() || hi <= LOG_ZERO {
        return LOG_ZERO;
    }
    let sum: f64 = xs.iter().map(|&x| (x - hi).exp()).sum();
    hi + sum.ln()
}
