//! Column-magnitude comparison model: B = Q·diag(r) with a normal spike and
//! slab on q_jk (precisions λ₀ > λ₁) and r_k ~ N(0, 1/λ). All conditionals
//! are conjugate normals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::normal::{draw_factors_normal, draw_sparsity, draw_variances, factor_sq_norms};
use super::orthonormal::{update_factor_row_orthonormal, LatitudeSampler};
use crate::dist::{std_normal, uniform_open};
use crate::error::{Error, Result};
use crate::model::{FactorMode, ObservationMatrix, PriorSpec};
use crate::special::{log1m_exp, sigmoid};

#[derive(Debug, Clone, PartialEq)]
pub struct GDState {
    /// G×K normalized loadings.
    pub q: DMatrix<f64>,
    /// K column magnitudes (unconstrained sign).
    pub r: DVector<f64>,
    pub gamma: DMatrix<bool>,
    pub log_theta: Vec<f64>,
    pub sigma2: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub sweep: u64,
    pub mode: FactorMode,
}

impl GDState {
    pub fn k(&self) -> usize {
        self.q.ncols()
    }

    pub fn g(&self) -> usize {
        self.q.nrows()
    }

    /// Implied loading matrix Q·diag(r).
    pub fn loadings(&self) -> DMatrix<f64> {
        let mut b = self.q.clone();
        for (k, mut col) in b.column_iter_mut().enumerate() {
            col *= self.r[k];
        }
        b
    }

    pub fn check_dims(&self, y: &ObservationMatrix) -> Result<()> {
        let (g, k) = self.q.shape();
        if g != y.g() || self.omega.shape() != (k, y.n()) {
            return Err(Error::Dimension("GD state does not match the data".into()));
        }
        if self.r.len() != k || self.gamma.shape() != (g, k) || self.log_theta.len() != k || self.sigma2.len() != g {
            return Err(Error::Dimension("GD state components disagree on G or K".into()));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid("sigma2 must be strictly positive".into()));
        }
        Ok(())
    }

    /// Residual Yᵀ − ΩᵀBᵀ in n×G layout.
    pub fn residual_t(&self, y: &ObservationMatrix) -> DMatrix<f64> {
        let mut r = y.data_t().clone();
        r.gemm(-1.0, &self.omega.transpose(), &self.loadings().transpose(), 1.0);
        r
    }
}

/// Conditional (mean, precision) of q_jk, computed from scratch.
pub fn gd_q_conditional(j: usize, k: usize, state: &GDState, y: &ObservationMatrix, prior: &PriorSpec) -> (f64, f64) {
    let s2 = state.sigma2[j];
    let rk = state.r[k];
    let mut ssq = 0.0;
    let mut cross = 0.0;
    for i in 0..y.n() {
        let w = state.omega[(k, i)];
        let mut partial = y.data()[(j, i)];
        for l in 0..state.k() {
            if l != k {
                partial -= state.q[(j, l)] * state.r[l] * state.omega[(l, i)];
            }
        }
        ssq += w * w;
        cross += w * partial;
    }
    let prec = rk * rk * ssq / s2 + prior.gd_precision(state.gamma[(j, k)]);
    (rk * cross / s2 / prec, prec)
}

/// Conditional (mean, precision) of r_k, computed from scratch.
pub fn gd_r_conditional(k: usize, state: &GDState, y: &ObservationMatrix, prior: &PriorSpec) -> (f64, f64) {
    let mut prec = prior.gd_lambda;
    let mut lin = 0.0;
    let ssq: f64 = state.omega.row(k).norm_squared();
    for j in 0..state.g() {
        let qjk = state.q[(j, k)];
        let s2 = state.sigma2[j];
        prec += qjk * qjk * ssq / s2;
        let mut cross = 0.0;
        for i in 0..y.n() {
            let mut partial = y.data()[(j, i)];
            for l in 0..state.k() {
                if l != k {
                    partial -= state.q[(j, l)] * state.r[l] * state.omega[(l, i)];
                }
            }
            cross += state.omega[(k, i)] * partial;
        }
        lin += qjk / s2 * cross;
    }
    (lin / prec, prec)
}

/// Draw every q_jk (j outer, k inner).
pub fn gd_update_q<R: Rng + ?Sized>(state: &mut GDState, y: &ObservationMatrix, prior: &PriorSpec, rng: &mut R) {
    let omega_t = state.omega.transpose();
    let ssq = factor_sq_norms(&state.omega);
    let mut resid = DVector::zeros(y.n());
    for j in 0..state.g() {
        let bj = DVector::from_fn(state.k(), |k, _| state.q[(j, k)] * state.r[k]);
        resid.copy_from(&y.data_t().column(j));
        resid.gemv(-1.0, &omega_t, &bj, 1.0);
        let s2 = state.sigma2[j];
        for k in 0..state.k() {
            let wk = omega_t.column(k);
            let rk = state.r[k];
            let old = state.q[(j, k)];
            let cross = wk.dot(&resid) + old * rk * ssq[k];
            let prec = rk * rk * ssq[k] / s2 + prior.gd_precision(state.gamma[(j, k)]);
            let new = rk * cross / s2 / prec + std_normal(rng) / prec.sqrt();
            let delta = (new - old) * rk;
            if delta != 0.0 {
                resid.axpy(-delta, &wk, 1.0);
            }
            state.q[(j, k)] = new;
        }
    }
}

/// Draw every r_k in order.
pub fn gd_update_r<R: Rng + ?Sized>(state: &mut GDState, y: &ObservationMatrix, prior: &PriorSpec, rng: &mut R) {
    let mut resid = state.residual_t(y);
    let ssq = factor_sq_norms(&state.omega);
    for k in 0..state.k() {
        let wk: DVector<f64> = state.omega.row(k).transpose();
        // c_j = ω_kᵀ R_j
        let c = resid.tr_mul(&wk);
        let rk = state.r[k];
        let mut prec = prior.gd_lambda;
        let mut lin = 0.0;
        for j in 0..state.g() {
            let qjk = state.q[(j, k)];
            let s2 = state.sigma2[j];
            prec += qjk * qjk * ssq[k] / s2;
            lin += qjk / s2 * (c[j] + qjk * rk * ssq[k]);
        }
        let new = lin / prec + std_normal(rng) / prec.sqrt();
        let delta = new - rk;
        if delta != 0.0 {
            let qk: DVector<f64> = state.q.column(k) * delta;
            resid.ger(-1.0, &wk, &qk, 1.0);
        }
        state.r[k] = new;
    }
}

/// P(γ = 1 | q, θ) with normal spike and slab densities.
pub fn gd_allocation_probability(q: f64, log_theta: f64, prior: &PriorSpec) -> f64 {
    let q2 = q * q;
    let slab = 0.5 * prior.gd_lambda1.ln() - 0.5 * prior.gd_lambda1 * q2 + log_theta;
    let spike = 0.5 * prior.gd_lambda0.ln() - 0.5 * prior.gd_lambda0 * q2 + log1m_exp(log_theta);
    sigmoid(slab - spike)
}

pub fn gd_update_allocation<R: Rng + ?Sized>(state: &mut GDState, prior: &PriorSpec, rng: &mut R) {
    for k in 0..state.k() {
        let lt = state.log_theta[k];
        for j in 0..state.g() {
            state.gamma[(j, k)] = uniform_open(rng) < gd_allocation_probability(state.q[(j, k)], lt, prior);
        }
    }
}

/// One scan: Q, r, Γ, Θ, Σ, Ω. The Ω-step follows `state.mode`.
pub fn gd_sweep<R: Rng + ?Sized>(
    state: &mut GDState,
    y: &ObservationMatrix,
    prior: &PriorSpec,
    sampler: &mut LatitudeSampler,
    rng: &mut R,
) -> Result<()> {
    state.check_dims(y)?;
    gd_update_q(state, y, prior, rng);
    gd_update_r(state, y, prior, rng);
    if state.q.iter().chain(state.r.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite loading draw".into()));
    }
    gd_update_allocation(state, prior, rng);
    draw_sparsity(&state.gamma, &mut state.log_theta, prior.alpha, rng);
    let resid = state.residual_t(y);
    draw_variances(&resid, &mut state.sigma2, prior, rng);
    let b = state.loadings();
    match state.mode {
        FactorMode::Normal => state.omega = draw_factors_normal(&b, &state.sigma2, y, rng)?,
        FactorMode::Orthonormal => {
            for k in 0..state.k() {
                update_factor_row_orthonormal(k, &b, &mut state.omega, &state.sigma2, y, sampler, rng)?;
            }
        }
    }
    state.sweep += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormality_defect;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn prior() -> PriorSpec {
        PriorSpec {
            gd_lambda: 0.5,
            gd_lambda0: 200.0,
            gd_lambda1: 1.0,
            ..PriorSpec::defaults_for(10)
        }
    }

    fn single(omega: f64, r: f64, y: f64) -> (GDState, ObservationMatrix) {
        (
            GDState {
                q: DMatrix::from_element(1, 1, 0.3),
                r: DVector::from_element(1, r),
                gamma: DMatrix::from_element(1, 1, true),
                log_theta: vec![-0.5],
                sigma2: DVector::from_element(1, 1.0),
                omega: DMatrix::from_element(1, 1, omega),
                sweep: 0,
                mode: FactorMode::Normal,
            },
            ObservationMatrix::new(DMatrix::from_element(1, 1, y)).unwrap(),
        )
    }

    #[test]
    fn q_conditional_single_datum() {
        let (s, y) = single(2.0, 1.0, 4.0);
        let (mean, prec) = gd_q_conditional(0, 0, &s, &y, &prior());
        assert!((prec - 5.0).abs() < 1e-14 && (mean - 1.6).abs() < 1e-14);
        let (s0, y0) = single(2.0, 0.0, 4.0);
        let (m0, p0) = gd_q_conditional(0, 0, &s0, &y0, &prior());
        assert_eq!((m0, p0), (0.0, 1.0));
    }

    #[test]
    fn r_conditional_matches_grid_posterior() {
        // G = 1: posterior ∝ N(y; q r ω, σ²)·N(r; 0, 1/λ) on a grid.
        let (mut s, y) = single(1.5, 0.0, 2.0);
        s.q[(0, 0)] = 0.8;
        s.sigma2[0] = 0.7;
        let p = prior();
        let (mean, prec) = gd_r_conditional(0, &s, &y, &p);
        let h = 1e-4;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        let mut r = -30.0;
        while r < 30.0 {
            let resid = 2.0 - 0.8 * r * 1.5;
            let f = (-0.5 * resid * resid / 0.7 - 0.5 * p.gd_lambda * r * r).exp();
            z += f;
            m1 += f * r;
            m2 += f * r * r;
            r += h;
        }
        let gm = m1 / z;
        let gv = m2 / z - gm * gm;
        assert!((mean - gm).abs() < 1e-6 && (1.0 / prec - gv).abs() < 1e-6);
        s.q[(0, 0)] = 0.0;
        let (m0, p0) = gd_r_conditional(0, &s, &y, &p);
        assert_eq!((m0, p0), (0.0, p.gd_lambda));
    }

    #[test]
    fn diffuse_magnitude_prior_scale() {
        let p = PriorSpec::defaults_for(1956);
        assert!(((1.0 / p.gd_lambda).sqrt() - 31.6).abs() < 0.05);
    }

    #[test]
    fn incremental_updates_match_direct_conditionals() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (g, n, k) = (5, 6, 3);
        let state = GDState {
            q: DMatrix::from_fn(g, k, |_, _| std_normal(&mut rng)),
            r: DVector::from_fn(k, |_, _| std_normal(&mut rng)),
            gamma: DMatrix::from_fn(g, k, |j, c| (j * 3 + c) % 2 == 0),
            log_theta: vec![-0.1, -0.5, -1.0],
            sigma2: DVector::from_fn(g, |j, _| 0.4 + 0.3 * j as f64),
            omega: DMatrix::from_fn(k, n, |_, _| std_normal(&mut rng)),
            sweep: 0,
            mode: FactorMode::Normal,
        };
        let y = ObservationMatrix::new(DMatrix::from_fn(g, n, |_, _| std_normal(&mut rng))).unwrap();
        let p = prior();

        let mut fast = state.clone();
        gd_update_q(&mut fast, &y, &p, &mut ChaCha20Rng::seed_from_u64(9));
        let mut slow = state.clone();
        let mut r2 = ChaCha20Rng::seed_from_u64(9);
        for j in 0..g {
            for c in 0..k {
                let (m, pr) = gd_q_conditional(j, c, &slow, &y, &p);
                slow.q[(j, c)] = m + std_normal(&mut r2) / pr.sqrt();
            }
        }
        assert!((&fast.q - &slow.q).amax() < 1e-10);

        gd_update_r(&mut fast, &y, &p, &mut ChaCha20Rng::seed_from_u64(10));
        let mut r3 = ChaCha20Rng::seed_from_u64(10);
        for c in 0..k {
            let (m, pr) = gd_r_conditional(c, &slow, &y, &p);
            slow.r[c] = m + std_normal(&mut r3) / pr.sqrt();
        }
        assert!((&fast.r - &slow.r).amax() < 1e-10);
    }

    #[test]
    fn product_prior_variance() {
        let p = prior();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let m = 1_000_000;
        for &lam in &[p.gd_lambda0, p.gd_lambda1] {
            let mut ss = 0.0;
            for _ in 0..m {
                let q = std_normal(&mut rng) / lam.sqrt();
                let r = std_normal(&mut rng) / p.gd_lambda.sqrt();
                ss += (q * r) * (q * r);
            }
            let expect = 1.0 / (lam * p.gd_lambda);
            assert!((ss / m as f64 / expect - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn orthonormal_mode_keeps_manifold() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (g, n, k) = (8, 10, 2);
        let mut state = GDState {
            q: DMatrix::from_fn(g, k, |_, _| std_normal(&mut rng)),
            r: DVector::from_element(k, 1.0),
            gamma: DMatrix::from_element(g, k, true),
            log_theta: vec![-0.2, -0.4],
            sigma2: DVector::from_element(g, 1.0),
            omega: crate::linalg::uniform_stiefel_scaled(k, n, &mut rng),
            sweep: 0,
            mode: FactorMode::Orthonormal,
        };
        let y = ObservationMatrix::new(DMatrix::from_fn(g, n, |_, _| std_normal(&mut rng))).unwrap();
        let mut lat = LatitudeSampler::default();
        for _ in 0..200 {
            gd_sweep(&mut state, &y, &prior(), &mut lat, &mut rng).unwrap();
            assert!(orthonormality_defect(&state.omega) < 1e-8);
        }
        assert_eq!(state.sweep, 200);
    }
}
