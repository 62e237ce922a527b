//! Standard normal tail probabilities in log space.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

/// Beyond this many standard deviations the upper tail comes from the
/// continued fraction for the Mills ratio instead of `erfc`.
const TAIL_SWITCH: f64 = 8.0;

/// `ln φ(x)`.
pub fn log_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

/// Mills ratio `Φ̄(x)/φ(x)` by backward evaluation of Laplace's continued fraction.
fn mills_ratio(x: f64) -> f64 {
    let mut acc = x;
    for k in (1..=80).rev() {
        acc = x + k as f64 / acc;
    }
    1.0 / acc
}

/// `ln Φ̄(x) = ln P(Z ≥ x)`, finite for all finite `x`.
pub fn log_sf(x: f64) -> f64 {
    if x == f64::INFINITY {
        f64::NEG_INFINITY
    } else if x == f64::NEG_INFINITY {
        0.0
    } else if x > TAIL_SWITCH {
        log_pdf(x) + mills_ratio(x).ln()
    } else if x < -TAIL_SWITCH {
        (-sf(-x)).ln_1p()
    } else {
        (0.5 * erfc(x * FRAC_1_SQRT_2)).ln()
    }
}

/// `Φ̄(x)`.
pub fn sf(x: f64) -> f64 {
    log_sf(x).exp()
}

/// `Φ(x)`.
pub fn cdf(x: f64) -> f64 {
    sf(-x)
}

/// `ln(1 − eᵘ)` for `u ≤ 0`.
pub fn ln_1m_exp(u: f64) -> f64 {
    if u > -LN_2 {
        (-u.exp_m1()).ln()
    } else {
        (-u.exp()).ln_1p()
    }
}

/// `ln(eᵃ + eᵇ)`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln Σ eˣⁱ`, summing smaller terms into larger ones.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut vals: Vec<f64> = values.into_iter().filter(|v| *v > f64::NEG_INFINITY).collect();
    if vals.is_empty() {
        return f64::NEG_INFINITY;
    }
    vals.sort_by(|a, b| b.total_cmp(a));
    let top = vals[0];
    let rest: f64 = vals[1..].iter().rev().map(|v| (v - top).exp()).sum();
    top + rest.ln_1p()
}

/// `ln P(lo ≤ Z ≤ hi)` for a standard normal `Z`; `−∞` for empty intervals.
pub fn log_interval_mass(lo: f64, hi: f64) -> f64 {
    if !(lo < hi) {
        return f64::NEG_INFINITY;
    }
    if lo >= 0.0 {
        let (a, b) = (log_sf(lo), log_sf(hi));
        a + ln_1m_exp(b - a)
    } else if hi <= 0.0 {
        log_interval_mass(-hi, -lo)
    } else {
        (-(sf(-lo) + sf(hi))).ln_1p()
    }
}
