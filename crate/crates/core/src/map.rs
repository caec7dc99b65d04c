//! Posterior mode search by EM, the increasing-λ₀ ladder with warm starts,
//! and the add/drop rule for the number of factors during sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::{std_normal, uniform_open};
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_rows, project_out_rows};
use crate::model::{log_variance_prior, ChainState, FactorMode, ObservationMatrix, PriorSpec};
use crate::sampler::normal::allocation_probability;
use crate::special::{log1m_exp, log_add_exp, LN_SQRT_2PI};

const THETA_FLOOR: f64 = 1e-10;

/// A posterior mode (B̂, Σ̂, Θ̂) with bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate {
    pub b_hat: DMatrix<f64>,
    pub sigma_hat: DVector<f64>,
    pub theta_hat: Vec<f64>,
    /// Columns with some |B̂_jk| above 10/λ₀.
    pub k_hat: usize,
    /// Final value of the EM objective.
    pub objective: f64,
    /// Objective after each iteration.
    pub objective_path: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Increasing spike rates for warm-started mode searches.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderSchedule {
    pub lambda1: f64,
    pub lambda0_sequence: Vec<f64>,
    pub stabilization_tol: f64,
}

impl Default for LadderSchedule {
    fn default() -> Self {
        Self {
            lambda1: 0.001,
            lambda0_sequence: vec![12.0, 15.0, 20.0, 30.0, 40.0],
            stabilization_tol: 0.01,
        }
    }
}

impl LadderSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Invalid("ladder lambda1 must be finite and > 0".into()));
        }
        if self.lambda0_sequence.is_empty() {
            return Err(Error::Invalid("ladder needs at least one lambda0".into()));
        }
        for w in self.lambda0_sequence.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Invalid("lambda0_sequence must be strictly increasing".into()));
            }
        }
        if self.lambda0_sequence[0] <= self.lambda1 {
            return Err(Error::Invalid("every lambda0 must exceed lambda1".into()));
        }
        if !(self.stabilization_tol > 0.0) {
            return Err(Error::Invalid("stabilization_tol must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when max |ΔB| falls below this.
    pub tol: f64,
    /// Rotate B by the Cholesky factor of E[ωωᵀ] after each M-step until B
    /// settles, then finish with plain EM from there. `max_iter` applies to
    /// each phase.
    pub parameter_expansion: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            parameter_expansion: false,
        }
    }
}

/// Count columns with any entry above 10/λ₀ in absolute value.
pub fn active_columns(b: &DMatrix<f64>, lambda0: f64) -> usize {
    let thr = 10.0 / lambda0;
    b.column_iter().filter(|c| c.iter().any(|v| v.abs() > thr)).count()
}

/// Orthogonal rotation R maximizing the varimax criterion of B·R.
pub fn varimax(b: &DMatrix<f64>, max_iter: usize, tol: f64) -> DMatrix<f64> {
    let (p, k) = b.shape();
    let mut r = DMatrix::identity(k, k);
    if k < 2 {
        return r;
    }
    let mut d = 0.0;
    for _ in 0..max_iter {
        let l = b * &r;
        let col_ss: Vec<f64> = l.column_iter().map(|c| c.norm_squared() / p as f64).collect();
        let target = DMatrix::from_fn(p, k, |j, c| l[(j, c)].powi(3) - l[(j, c)] * col_ss[c]);
        let m = b.transpose() * target;
        if !m.iter().all(|v| v.is_finite()) {
            break;
        }
        let svd = m.svd(true, true);
        let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
            break;
        };
        r = u * vt;
        let d_new = svd.singular_values.sum();
        if d_new < d * (1.0 + tol) {
            break;
        }
        d = d_new;
    }
    r
}

/// Starting point from the SVD of Y: B = U_K S_K / √n rotated by varimax,
/// Σ from the rank-K residual, θ = 1/2.
pub fn svd_init(y: &ObservationMatrix, k: usize, prior: &PriorSpec) -> Result<MapEstimate> {
    let (g, n) = (y.g(), y.n());
    if k == 0 || k > g.min(n) {
        return Err(Error::Invalid(format!("need 1 <= K <= min(G, n) = {}, got {k}", g.min(n))));
    }
    let svd = y.data().clone().svd(true, false);
    let u = svd.u.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    // nalgebra does not sort singular values; order them.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sqrt_n = (n as f64).sqrt();
    let b = DMatrix::from_fn(g, k, |j, c| u[(j, order[c])] * svd.singular_values[order[c]] / sqrt_n);
    // Rotation leaves BBᵀ, and so the rank-K residual, unchanged.
    let b = &b * varimax(&b, 500, 1e-10);
    // Rank-K residual variance per row.
    let fitted_energy: DVector<f64> = DVector::from_fn(g, |j, _| (0..k).map(|c| b[(j, c)].powi(2)).sum::<f64>() * n as f64);
    let sigma = DVector::from_fn(g, |j, _| {
        let rss = (y.data().row(j).norm_squared() - fitted_energy[j]).max(0.0);
        (prior.eta * prior.epsilon + rss) / (prior.eta + n as f64 + 2.0)
    });
    if !(b.iter().all(|v| v.is_finite()) && sigma.iter().all(|v| v.is_finite() && *v > 0.0)) {
        return Err(Error::Numerical("initial SVD produced non-finite parameters".into()));
    }
    Ok(MapEstimate {
        k_hat: active_columns(&b, prior.lambda0),
        b_hat: b,
        sigma_hat: sigma,
        theta_hat: vec![0.5; k],
        objective: f64::NEG_INFINITY,
        objective_path: Vec::new(),
        iterations: 0,
        converged: false,
    })
}

/// log N(Y; 0, BBᵀ + Σ) + Σ log[(1−θ)ψ(β|λ₀) + θψ(β|λ₁)] + Σ log IG(σ²).
/// Θ carries a flat prior in this objective.
pub fn em_objective(y: &ObservationMatrix, b: &DMatrix<f64>, sigma2: &DVector<f64>, theta: &[f64], prior: &PriorSpec) -> f64 {
    let (g, n) = (y.g(), y.n());
    let k = b.ncols();
    let mut w = b.clone();
    for (j, mut row) in w.row_iter_mut().enumerate() {
        row /= sigma2[j];
    }
    let mut p = b.transpose() * &w;
    for d in 0..k {
        p[(d, d)] += 1.0;
    }
    let Some(chol) = p.cholesky() else {
        return f64::NEG_INFINITY;
    };
    let logdet_p: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet = sigma2.iter().map(|s| s.ln()).sum::<f64>() + logdet_p;
    let z = w.transpose() * y.data();
    let pz = chol.solve(&z);
    let mut quad = 0.0;
    for j in 0..g {
        quad += y.data().row(j).norm_squared() / sigma2[j];
    }
    quad -= z.dot(&pz);
    let loglik = -((n * g) as f64) * LN_SQRT_2PI - 0.5 * n as f64 * logdet - 0.5 * quad;

    let mut logprior = 0.0;
    for c in 0..k {
        let lt = theta[c].ln();
        let l1t = log1m_exp(lt);
        for j in 0..g {
            let a = b[(j, c)].abs();
            let slab = lt + (0.5 * prior.lambda1).ln() - prior.lambda1 * a;
            let spike = l1t + (0.5 * prior.lambda0).ln() - prior.lambda0 * a;
            logprior += log_add_exp(slab, spike);
        }
    }
    logprior += sigma2.iter().map(|&s| log_variance_prior(s, prior)).sum::<f64>();
    loglik + logprior
}

/// Non-increasing least-squares fit (pool-adjacent-violators, equal weights).
fn antitonic(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 >= m2 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((m1 * c1 as f64 + m2 * c2 as f64) / (c1 + c2) as f64, c1 + c2);
        }
    }
    blocks.into_iter().flat_map(|(m, c)| std::iter::repeat_n(m, c)).collect()
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// EM for the posterior mode with normal factors and Γ marginalized.
pub fn em_map(y: &ObservationMatrix, prior: &PriorSpec, init: MapEstimate, options: &EmOptions) -> Result<MapEstimate> {
    prior.validate()?;
    let (g, n) = (y.g(), y.n());
    let k = init.b_hat.ncols();
    if init.b_hat.nrows() != g || init.sigma_hat.len() != g || init.theta_hat.len() != k {
        return Err(Error::Dimension("EM initial estimate does not match the data".into()));
    }
    let mut b = init.b_hat;
    let mut sigma2 = init.sigma_hat;
    let mut theta: Vec<f64> = init.theta_hat.iter().map(|t| t.clamp(THETA_FLOOR, 1.0 - THETA_FLOOR)).collect();
    let mut path = Vec::with_capacity(options.max_iter + 1);
    let mut converged = false;
    let mut iterations = 0;
    let yy: Vec<f64> = (0..g).map(|j| y.data().row(j).norm_squared()).collect();
    let mut expanding = options.parameter_expansion;
    let mut phase_iter = 0;

    loop {
        if phase_iter == options.max_iter {
            if !expanding {
                break;
            }
            expanding = false;
            phase_iter = 0;
        }
        phase_iter += 1;
        iterations += 1;
        // E-step.
        let mut w = b.clone();
        for (j, mut row) in w.row_iter_mut().enumerate() {
            row /= sigma2[j];
        }
        let mut p = b.transpose() * &w;
        for d in 0..k {
            p[(d, d)] += 1.0;
        }
        let chol = p
            .cholesky()
            .ok_or_else(|| Error::Numerical("EM: I + BᵀΣ⁻¹B is not positive definite".into()))?;
        let v = chol.inverse();
        let m = chol.solve(&(w.transpose() * y.data()));
        let a = &v * n as f64 + &m * m.transpose();
        // K×G cross moments Σᵢ E[ω_i] y_ij.
        let c = &m * y.data_t();

        // M-step for B, row by row.
        let b_old = b.clone();
        for j in 0..g {
            let s2 = sigma2[j];
            let pen: Vec<f64> = (0..k)
                .map(|col| {
                    let pj = allocation_probability(b[(j, col)], theta[col].ln(), prior);
                    pj * prior.lambda1 + (1.0 - pj) * prior.lambda0
                })
                .collect();
            for _ in 0..50 {
                let mut delta: f64 = 0.0;
                for col in 0..k {
                    let mut r = c[(col, j)];
                    for l in 0..k {
                        if l != col {
                            r -= a[(col, l)] * b[(j, l)];
                        }
                    }
                    let new = soft_threshold(r, s2 * pen[col]) / a[(col, col)];
                    delta = delta.max((new - b[(j, col)]).abs());
                    b[(j, col)] = new;
                }
                if delta < 1e-12 {
                    break;
                }
            }
            // σ² at the mode of its conditional given the new row.
            let bj = b.row(j).transpose();
            let rss = yy[j] - 2.0 * bj.dot(&c.column(j)) + (bj.transpose() * &a * &bj)[(0, 0)];
            sigma2[j] = (prior.eta * prior.epsilon + rss.max(0.0)) / (prior.eta + n as f64 + 2.0);
        }

        // Θ: ordered maximizer of Σ_k [P_k log θ_k + (G − P_k) log(1 − θ_k)].
        let mean_p: Vec<f64> = (0..k)
            .map(|col| (0..g).map(|j| allocation_probability(b_old[(j, col)], theta[col].ln(), prior)).sum::<f64>() / g as f64)
            .collect();
        theta = antitonic(&mean_p)
            .into_iter()
            .map(|t| t.clamp(THETA_FLOOR, 1.0 - THETA_FLOOR))
            .collect();

        if expanding {
            if let Some(ch) = (&a / n as f64).cholesky() {
                b = &b * ch.l();
            }
        }

        if b.iter().chain(sigma2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("EM produced non-finite parameters".into()));
        }
        path.push(em_objective(y, &b, &sigma2, &theta, prior));
        let change = (&b - &b_old).amax();
        if change < options.tol {
            if expanding {
                // The rotated fixed point need not be stationary for the
                // unexpanded objective.
                expanding = false;
                phase_iter = 0;
                continue;
            }
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM reached max_iter = {} without meeting tol = {}", options.max_iter, options.tol);
    }
    Ok(MapEstimate {
        k_hat: active_columns(&b, prior.lambda0),
        objective: *path.last().unwrap_or(&f64::NEG_INFINITY),
        objective_path: path,
        b_hat: b,
        sigma_hat: sigma2,
        theta_hat: theta,
        iterations,
        converged,
    })
}

/// Result of a ladder run: one estimate per visited λ₀.
#[derive(Debug, Clone)]
pub struct LadderPath {
    pub lambda0: Vec<f64>,
    pub stages: Vec<MapEstimate>,
    /// Max-norm change relative to max(1, ‖B̂⁽ᵗ⁾‖_max) against the previous stage.
    pub relative_changes: Vec<f64>,
    pub stabilized: bool,
}

impl LadderPath {
    pub fn last(&self) -> &MapEstimate {
        self.stages.last().expect("ladder has at least one stage")
    }
}

/// Warm-started EM along the ladder. Stops early once the relative max-norm
/// change between consecutive stages drops below the tolerance, unless
/// `run_all` is set.
pub fn run_ladder(
    y: &ObservationMatrix,
    schedule: &LadderSchedule,
    prior: &PriorSpec,
    k_init: usize,
    options: &EmOptions,
    run_all: bool,
) -> Result<LadderPath> {
    schedule.validate()?;
    let base = PriorSpec {
        lambda0: schedule.lambda0_sequence[0],
        lambda1: schedule.lambda1,
        ..*prior
    };
    let mut current = svd_init(y, k_init, &base)?;
    let mut path = LadderPath {
        lambda0: Vec::new(),
        stages: Vec::new(),
        relative_changes: Vec::new(),
        stabilized: false,
    };
    for &l0 in &schedule.lambda0_sequence {
        let stage_prior = PriorSpec { lambda0: l0, ..base };
        let est = em_map(y, &stage_prior, current.clone(), options)?;
        let rel = if path.stages.is_empty() {
            f64::INFINITY
        } else {
            (&est.b_hat - &current.b_hat).amax() / est.b_hat.amax().max(1.0)
        };
        log::info!("ladder lambda0 = {l0}: K_hat = {}, objective = {:.4}, change = {rel:.3e}", est.k_hat, est.objective);
        path.lambda0.push(l0);
        path.relative_changes.push(rel);
        path.stages.push(est.clone());
        current = est;
        if rel < schedule.stabilization_tol {
            path.stabilized = true;
            if !run_all {
                break;
            }
        }
    }
    Ok(path)
}

/// Change in K made by [`adapt_factor_count`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adaptation {
    pub dropped: Vec<usize>,
    pub appended: bool,
}

/// Drop factors whose allocation column is all zero; when none was dropped,
/// append one null factor (zero loadings, zero allocations, Ω row from the
/// factor prior). At least one factor is always kept.
pub fn adapt_factor_count<R: Rng + ?Sized>(state: &mut ChainState, alpha: f64, rng: &mut R) -> Result<Adaptation> {
    let (g, k) = state.b.shape();
    let n = state.n();
    let dropped: Vec<usize> = (0..k).filter(|&c| state.gamma.column(c).iter().all(|&x| !x)).collect();
    let keep: Vec<usize> = (0..k).filter(|c| !dropped.contains(c)).collect();
    let append = dropped.is_empty() || keep.is_empty();
    if !dropped.is_empty() {
        let mut keep_or_one = keep.clone();
        if keep_or_one.is_empty() {
            // Reuse the first column slot as the surviving null factor.
            keep_or_one.push(0);
        }
        state.b = state.b.select_columns(&keep_or_one);
        state.gamma = DMatrix::from_fn(g, keep_or_one.len(), |j, c| state.gamma[(j, keep_or_one[c])]);
        state.omega = state.omega.select_rows(&keep_or_one);
        state.log_theta = keep_or_one.iter().map(|&c| state.log_theta[c]).collect();
        if keep.is_empty() {
            state.b.fill(0.0);
            state.gamma.fill(false);
            state.log_theta[0] = state.log_theta[0].min(0.0);
            let row = null_factor_row(&DMatrix::zeros(0, n), n, state.mode, rng);
            state.omega = DMatrix::from_fn(1, n, |_, i| row[i]);
        }
        if state.mode == FactorMode::Orthonormal {
            orthonormalize_rows(&mut state.omega, (n as f64).sqrt())?;
        }
        return Ok(Adaptation {
            dropped,
            appended: keep.is_empty(),
        });
    }
    debug_assert!(append);
    if state.mode == FactorMode::Orthonormal && k + 1 > n.saturating_sub(1) {
        log::warn!("factor count capped at {k}: orthonormal factors need n >= K + 1");
        return Ok(Adaptation {
            dropped,
            appended: false,
        });
    }
    let row = null_factor_row(&state.omega, n, state.mode, rng);
    state.omega = state.omega.clone().insert_row(k, 0.0);
    state.omega.set_row(k, &row.transpose());
    state.b = state.b.clone().insert_column(k, 0.0);
    state.gamma = state.gamma.clone().insert_column(k, false);
    // θ_{K+1} = θ_K·ν with ν ~ Beta(α, 1).
    let last = state.log_theta.last().copied().unwrap_or(0.0);
    state.log_theta.push(last + uniform_open(rng).ln() / alpha);
    Ok(Adaptation { dropped, appended: true })
}

/// One new factor row of length n drawn from the factor prior given the
/// existing rows.
fn null_factor_row<R: Rng + ?Sized>(existing: &DMatrix<f64>, n: usize, mode: FactorMode, rng: &mut R) -> DVector<f64> {
    match mode {
        FactorMode::Normal => DVector::from_fn(n, |_, _| std_normal(rng)),
        FactorMode::Orthonormal => loop {
            let mut v = DVector::from_fn(n, |_, _| std_normal(rng));
            project_out_rows(&mut v, existing, None, n as f64);
            let nrm = v.norm();
            if nrm > 1e-8 {
                return v * ((n as f64).sqrt() / nrm);
            }
        },
    }
}
