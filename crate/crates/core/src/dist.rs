//! Random variate generators: one-sided truncated normals, inverse gamma,
//! Laplace, truncated Beta (via adaptive rejection in log space), and a
//! stepping-out slice sampler.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Open01, StandardNormal};

use crate::special::{log1m_exp, log_ndtr, ndtri};

/// Truncation point (in standard deviations) beyond which exponential rejection is used.
pub const TAIL_SWITCH: f64 = 4.0;

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Open01.sample(rng)
}

/// Draw Z ~ N(0,1) conditioned on Z >= tau.
pub fn std_normal_above<R: Rng + ?Sized>(tau: f64, rng: &mut R) -> f64 {
    if tau > TAIL_SWITCH {
        // Robert (1995) translated-exponential proposal.
        let rate = 0.5 * (tau + (tau * tau + 4.0).sqrt());
        let exp = Exp::new(rate).expect("positive rate");
        loop {
            let z = tau + exp.sample(rng);
            let u: f64 = uniform_open(rng);
            if u.ln() <= -0.5 * (z - rate) * (z - rate) {
                return z;
            }
        }
    }
    // Inverse CDF through the upper-tail mass Q(tau) = Φ(-tau).
    let log_upper = log_ndtr(-tau);
    let u: f64 = uniform_open(rng);
    let q = (u.ln() + log_upper).exp();
    let z = -ndtri(q);
    // Guard against roundoff right at the boundary.
    z.max(tau)
}

/// Draw Z ~ N(0,1) conditioned on Z <= tau.
pub fn std_normal_below<R: Rng + ?Sized>(tau: f64, rng: &mut R) -> f64 {
    -std_normal_above(-tau, rng)
}

/// Inverse-Gamma(shape, scale) with density ∝ x^{-shape-1} exp(-scale/x).
pub fn inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("valid gamma parameters");
    loop {
        let x: f64 = g.sample(rng);
        if x > 0.0 {
            let v = 1.0 / x;
            if v.is_finite() {
                return v;
            }
        }
    }
}

/// Laplace(0, 1/rate): density (rate/2) exp(-rate |x|).
pub fn laplace<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    let e: f64 = Exp::new(rate).expect("positive rate").sample(rng);
    if rng.random::<bool>() {
        e
    } else {
        -e
    }
}

/// A concave log density on an interval, with its derivative.
pub trait LogConcave {
    fn log_density(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
}

const ARS_MAX_POINTS: usize = 64;

/// Adaptive rejection sampling (tangent hull) for a log-concave density on
/// `[lower, upper]`. `lower` may be `-inf` provided the density's slope is
/// positive at the leftmost starting point, and likewise for `upper`.
pub fn adaptive_rejection<D: LogConcave, R: Rng + ?Sized>(
    density: &D,
    lower: f64,
    upper: f64,
    start: &[f64],
    rng: &mut R,
) -> f64 {
    let mut xs: Vec<f64> = start
        .iter()
        .copied()
        .filter(|x| x.is_finite() && *x > lower && *x < upper)
        .collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + a.abs()));
    assert!(!xs.is_empty(), "adaptive rejection needs an interior starting point");
    let mut hs: Vec<f64> = xs.iter().map(|&x| density.log_density(x)).collect();
    let mut ds: Vec<f64> = xs.iter().map(|&x| density.derivative(x)).collect();

    loop {
        // Intersections of consecutive tangents.
        let m = xs.len();
        let mut z = Vec::with_capacity(m + 1);
        z.push(lower);
        for i in 0..m - 1 {
            let (x0, x1) = (xs[i], xs[i + 1]);
            let (h0, h1) = (hs[i], hs[i + 1]);
            let (d0, d1) = (ds[i], ds[i + 1]);
            let zi = if (d0 - d1).abs() <= 1e-12 * (d0.abs() + d1.abs()).max(1e-300) {
                0.5 * (x0 + x1)
            } else {
                (h1 - h0 - x1 * d1 + x0 * d0) / (d0 - d1)
            };
            z.push(zi.clamp(x0, x1));
        }
        z.push(upper);

        // Log mass of the exponential hull on each segment.
        let seg_log_mass: Vec<f64> = (0..m)
            .map(|i| segment_log_mass(hs[i], ds[i], xs[i], z[i], z[i + 1]))
            .collect();
        let max_lm = seg_log_mass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = seg_log_mass.iter().map(|l| (l - max_lm).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut seg = m - 1;
        for (i, w) in weights.iter().enumerate() {
            if pick < *w {
                seg = i;
                break;
            }
            pick -= w;
        }

        let x = sample_exp_segment(ds[seg], z[seg], z[seg + 1], rng);
        let hull = hs[seg] + (x - xs[seg]) * ds[seg];
        let hx = density.log_density(x);
        let u: f64 = uniform_open(rng);
        if u.ln() <= hx - hull {
            return x;
        }
        if xs.len() < ARS_MAX_POINTS && x.is_finite() {
            let pos = xs.partition_point(|&v| v < x);
            if pos < xs.len() && xs[pos] == x {
                continue;
            }
            xs.insert(pos, x);
            hs.insert(pos, hx);
            ds.insert(pos, density.derivative(x));
        }
    }
}

fn segment_log_mass(h: f64, d: f64, x: f64, zl: f64, zr: f64) -> f64 {
    if zr <= zl {
        return f64::NEG_INFINITY;
    }
    let ul = if zl.is_finite() { h + (zl - x) * d } else { f64::NEG_INFINITY };
    let ur = if zr.is_finite() { h + (zr - x) * d } else { f64::NEG_INFINITY };
    if d.abs() < 1e-300 || (zr - zl) * d.abs() < 1e-10 {
        if !(zl.is_finite() && zr.is_finite()) {
            return f64::INFINITY;
        }
        return h + (zr - zl).ln() + (0.5 * (zl + zr) - x) * d;
    }
    let (hi, lo) = if d > 0.0 { (ur, ul) } else { (ul, ur) };
    // ∫ exp(u) = (exp(hi) - exp(lo)) / |d|
    hi + log1m_exp(lo - hi) - d.abs().ln()
}

fn sample_exp_segment<R: Rng + ?Sized>(d: f64, zl: f64, zr: f64, rng: &mut R) -> f64 {
    let u: f64 = uniform_open(rng);
    let width = zr - zl;
    if d.abs() < 1e-300 || width * d.abs() < 1e-10 {
        return zl + u * width;
    }
    if d > 0.0 {
        // density ∝ exp(d (x - zr)) on [zl, zr]
        let tail = (-d * width).exp();
        zr + (1.0 - u * (1.0 - tail)).ln() / d
    } else {
        let tail = (d * width).exp();
        zl + (1.0 - u * (1.0 - tail)).ln() / d
    }
}

/// log density of log(θ) when θ ~ Beta(a, b): a·u + (b-1)·log(1 - e^u).
struct LogBeta {
    a: f64,
    b: f64,
}

impl LogConcave for LogBeta {
    fn log_density(&self, u: f64) -> f64 {
        let tail = if self.b == 1.0 { 0.0 } else { (self.b - 1.0) * log1m_exp(u) };
        self.a * u + tail
    }
    fn derivative(&self, u: f64) -> f64 {
        if self.b == 1.0 {
            return self.a;
        }
        // d/du log(1 - e^u) = -e^u / (1 - e^u) = -1 / expm1(-u)
        self.a - (self.b - 1.0) / (-u).exp_m1()
    }
}

/// Draw log θ where θ ~ Beta(a, b) truncated to [exp(log_lo), exp(log_hi)].
///
/// Works in log space so that tiny θ (far below the smallest positive double)
/// stay representable. Requires a >= 0, b >= 1, and a > 0 when `log_lo` is
/// `-inf`.
pub fn truncated_beta_log<R: Rng + ?Sized>(a: f64, b: f64, log_lo: f64, log_hi: f64, rng: &mut R) -> f64 {
    assert!(a >= 0.0 && b >= 1.0, "truncated beta requires a >= 0, b >= 1");
    assert!(log_lo < log_hi && log_hi <= 0.0, "empty truncation interval");
    assert!(a > 0.0 || log_lo.is_finite(), "improper truncated beta");
    let dens = LogBeta { a, b };
    let hi = log_hi.min(-1e-300);
    // Mode of a·u + (b-1) log(1-e^u) sits at e^u = a / (a + b - 1).
    let mode = if a > 0.0 && b > 1.0 {
        (a / (a + b - 1.0)).ln()
    } else if a > 0.0 {
        hi
    } else {
        log_lo
    };
    let width_scale = if a > 0.0 && b > 1.0 {
        let e = mode.exp();
        let curv = (b - 1.0) * e / ((1.0 - e) * (1.0 - e));
        (1.0 / curv.max(1e-300)).sqrt()
    } else if a > 0.0 {
        1.0 / a
    } else {
        1.0
    };
    let mut start = Vec::with_capacity(5);
    let interior = |x: f64| x > log_lo && x < hi;
    if log_lo.is_finite() {
        let w = hi - log_lo;
        for f in [0.02, 0.5, 0.98] {
            start.push(log_lo + f * w);
        }
    } else {
        // Need a point with positive slope on the far left.
        let mut x = mode.min(hi) - 2.0 * width_scale.max(1e-3);
        while dens.derivative(x) <= 0.0 {
            x -= 4.0 * width_scale.max(1.0);
        }
        start.push(x);
        start.push(0.5 * (x + hi));
        start.push(hi - 1e-3 * (hi - x));
    }
    for s in [mode - width_scale, mode, mode + width_scale] {
        if interior(s) {
            start.push(s);
        }
    }
    adaptive_rejection(&dens, log_lo, hi, &start, rng)
}

/// One univariate slice-sampling update (stepping out, then shrinkage).
pub fn slice_sample<F: Fn(f64) -> f64, R: Rng + ?Sized>(
    log_density: F,
    x0: f64,
    width: f64,
    max_steps: usize,
    rng: &mut R,
) -> f64 {
    let f0 = log_density(x0);
    let level = f0 + uniform_open(rng).ln();
    let mut left = x0 - width * rng.random::<f64>();
    let mut right = left + width;
    let j = (max_steps as f64 * rng.random::<f64>()).floor() as usize;
    let mut k = max_steps.saturating_sub(1).saturating_sub(j);
    let mut jl = j;
    while jl > 0 && log_density(left) > level {
        left -= width;
        jl -= 1;
    }
    while k > 0 && log_density(right) > level {
        right += width;
        k -= 1;
    }
    loop {
        let x = left + (right - left) * rng.random::<f64>();
        if log_density(x) > level {
            return x;
        }
        if x < x0 {
            left = x;
        } else {
            right = x;
        }
        if right - left < 1e-14 * (1.0 + x0.abs()) {
            return x0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn normal_above_respects_truncation_in_both_regimes() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for &tau in &[-3.0, 0.0, 2.0, 3.9, 4.1, 12.0] {
            let mut sum = 0.0;
            let m = 20_000;
            for _ in 0..m {
                let z = std_normal_above(tau, &mut rng);
                assert!(z >= tau);
                sum += z;
            }
            // E[Z | Z >= tau] = φ(tau) / Q(tau)
            let mean = (-0.5 * tau * tau - crate::special::LN_SQRT_2PI - log_ndtr(-tau)).exp();
            let sd_bound = 5.0 / (m as f64).sqrt();
            assert!((sum / m as f64 - mean).abs() < sd_bound, "tau = {tau}");
        }
    }

    #[test]
    fn inverse_gamma_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let m = 100_000;
        let s: f64 = (0..m).map(|_| inverse_gamma(5.0, 8.0, &mut rng)).sum();
        // mean = scale / (shape - 1) = 2, sd = 2/sqrt(3)
        assert!((s / m as f64 - 2.0).abs() < 4.0 * 1.155 / (m as f64).sqrt());
    }

    #[test]
    fn truncated_beta_stays_inside_bounds_and_matches_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        // Untruncated Beta(3, 5): mean 3/8.
        let m = 50_000;
        let mut s = 0.0;
        for _ in 0..m {
            let u = truncated_beta_log(3.0, 5.0, f64::NEG_INFINITY, 0.0, &mut rng);
            assert!(u < 0.0);
            s += u.exp();
        }
        assert!((s / m as f64 - 0.375).abs() < 0.004);

        for _ in 0..1000 {
            let u = truncated_beta_log(0.0, 40.0, -50.0, -0.5, &mut rng);
            assert!((-50.0..=-0.5).contains(&u));
        }
        // Tiny shape with open lower bound produces extremely small θ without underflow.
        let u = truncated_beta_log(1.0 / 1956.0, 1957.0, f64::NEG_INFINITY, -1.0, &mut rng);
        assert!(u.is_finite());
    }

    #[test]
    fn slice_sampler_targets_a_normal() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut x = 0.0;
        let (mut s, mut s2) = (0.0, 0.0);
        let m = 40_000;
        for _ in 0..m {
            x = slice_sample(|v| -0.5 * (v - 1.0) * (v - 1.0) / 4.0, x, 1.0, 50, &mut rng);
            s += x;
            s2 += x * x;
        }
        let mean = s / m as f64;
        let var = s2 / m as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.1);
        assert!((var - 4.0).abs() < 0.3);
    }
}
