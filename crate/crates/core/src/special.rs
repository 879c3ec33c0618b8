//! Normal CDF and log-sum-exp helpers.
//!
//! `Φ` is evaluated through the complementary error function (a rational
//! approximation accurate to double precision) in the body, and through the
//! continued fraction of the Mills ratio in the far lower tail, where
//! `Φ(z)` itself would underflow long before `ln Φ(z)` does.

use crate::Scalar;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const TAIL_SWITCH: f64 = -5.0;
const MILLS_TERMS: usize = 200;

/// `ln φ(z)` for the standard normal density.
#[inline]
pub(crate) fn log_norm_pdf_f64(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Mills ratio `R(x) = (1 − Φ(x)) / φ(x)` for `x ≥ 5` via backward
/// evaluation of `1 / (x + 1/(x + 2/(x + 3/(x + …))))`.
fn mills_ratio(x: f64) -> f64 {
    let mut t = x;
    for k in (1..=MILLS_TERMS).rev() {
        t = x + k as f64 / t;
    }
    1.0 / t
}

pub(crate) fn log_norm_cdf_f64(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z < TAIL_SWITCH {
        log_norm_pdf_f64(z) + mills_ratio(-z).ln()
    } else if z < 0.0 {
        (0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        (-0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)).ln_1p()
    }
}

/// `d/dz ln Φ(z) = φ(z) / Φ(z)`, evaluated in log space.
pub(crate) fn d_log_norm_cdf_f64(z: f64, log_cdf: f64) -> f64 {
    (log_norm_pdf_f64(z) - log_cdf).exp()
}

/// Standard normal CDF.
pub fn norm_cdf<T: Scalar>(z: T) -> T {
    T::lit(log_norm_cdf_f64(z.as_f64()).exp())
}

/// `ln Φ(z)`, finite for every finite `z` of moderate size (no underflow to
/// `−∞` for `|z| ≤ 30`).
pub fn log_norm_cdf<T: Scalar>(z: T) -> T {
    T::lit(log_norm_cdf_f64(z.as_f64()))
}

/// Max-shifted `ln Σ exp(xᵢ)`. Returns `−∞` for an empty slice or when every
/// entry is `−∞`.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    if m == T::infinity() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}
