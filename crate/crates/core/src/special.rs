//! Scalar special functions used by the samplers, all in log space where it matters.

use statrs::function::erf::{erfc, erfc_inv};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// log Φ(x) for the standard normal CDF, accurate deep into the lower tail.
pub fn log_ndtr(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 6.0 {
        // Φ(x) = 1 - Q(x); Q tiny.
        return (-0.5 * erfc(x / std::f64::consts::SQRT_2)).ln_1p();
    }
    if x > -30.0 {
        return (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln();
    }
    // Lower tail: Φ(x) = φ(x) R(-x) with the Mills ratio R from its continued fraction.
    let t = -x;
    -0.5 * t * t - LN_SQRT_2PI + mills_ratio(t).ln()
}

/// Φ(x).
pub fn ndtr(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Φ⁻¹(p) for p in (0, 1).
pub fn ndtri(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Mills ratio Q(t)/φ(t) for t > 0 by backward evaluation of Laplace's continued fraction.
fn mills_ratio(t: f64) -> f64 {
    let mut acc = t;
    for k in (1..=60).rev() {
        acc = t + k as f64 / acc;
    }
    1.0 / acc
}

/// log(exp(a) + exp(b)).
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// log(1 - exp(x)) for x <= 0.
pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Logistic function of a log-odds value, without overflow.
pub fn sigmoid(log_odds: f64) -> f64 {
    if log_odds >= 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    }
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}
