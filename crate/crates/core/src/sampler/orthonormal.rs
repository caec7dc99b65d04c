//! Row-wise update of Ω under the √n-orthonormal factor prior.
//!
//! Given Ω_{−k}, row k lives on the √n-sphere inside the orthogonal
//! complement of the other rows, and its conditional there is a von
//! Mises–Fisher law with mean direction u and concentration κ. The update
//! draws the latitude d = ⟨Ω_{k·}, u⟩ by Metropolis and the remaining
//! direction uniformly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::normal::{update_allocation, update_idio_variance, update_loadings, update_sparsity};
use super::SweepOptions;
use crate::dist::{std_normal, uniform_open};
use crate::error::{Error, Result};
use crate::linalg::{project_out_rows, project_out_unit};
use crate::model::{ChainState, FactorMode, ObservationMatrix, PriorSpec};

/// Loadings with norm below this are treated as zero.
pub const ZERO_LOADING: f64 = 1e-12;

/// Cauchy independence-proposal scale in units of the target's curvature scale.
const INDEPENDENCE_WIDTH: f64 = 1.0;

/// Conditional of one factor row restricted to its sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereSliceParams {
    /// Ω̄_{k·}.
    pub mean_row: DVector<f64>,
    /// σ̄²_k = (B_{·k}ᵀΣ⁻¹B_{·k})⁻¹.
    pub sigma_bar_sq: f64,
    /// ‖P⊥ Ω̄_{k·}‖ with P⊥ projecting off the rows of Ω_{−k}.
    pub proj_norm: f64,
    pub n: usize,
    pub k: usize,
}

impl SphereSliceParams {
    /// Concentration κ = proj_norm / σ̄².
    pub fn concentration(&self) -> f64 {
        self.proj_norm / self.sigma_bar_sq
    }
}

/// Orthonormal basis (as columns) of the orthogonal complement of the given
/// rows, and of `extra` when supplied. Candidates are the canonical vectors,
/// taken greedily by largest remaining norm.
pub fn complement_basis(rows: &DMatrix<f64>, extra: Option<&DVector<f64>>) -> Result<DMatrix<f64>> {
    let n = rows.ncols();
    let mut spanning: Vec<DVector<f64>> = rows.row_iter().map(|r| r.transpose()).collect();
    if let Some(e) = extra {
        if e.len() != n {
            return Err(Error::Dimension(format!("extra vector has length {}, expected {n}", e.len())));
        }
        spanning.push(e.clone());
    }
    if spanning.len() > n {
        return Err(Error::Dimension(format!("{} vectors in dimension {n}", spanning.len())));
    }
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(n);
    for (i, v0) in spanning.iter().enumerate() {
        let orig = v0.norm();
        let mut v = v0.clone();
        for _ in 0..2 {
            for qi in &q {
                project_out_unit(&mut v, qi);
            }
        }
        let nrm = v.norm();
        if !(nrm > 1e-10 * orig) {
            return Err(Error::Numerical(format!("row {} is numerically dependent on earlier rows", i + 1)));
        }
        q.push(v / nrm);
    }
    let r = q.len();
    // Residual projector I − QQᵀ; its columns are the projected canonical vectors.
    let mut p = DMatrix::<f64>::identity(n, n);
    for qi in &q {
        p.ger(-1.0, qi, qi, 1.0);
    }
    let mut out = DMatrix::zeros(n, n - r);
    for c in 0..n - r {
        let (best, _) = p
            .column_iter()
            .enumerate()
            .map(|(i, col)| (i, col.norm_squared()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mut v: DVector<f64> = p.column(best).into_owned();
        for _ in 0..2 {
            for qi in &q {
                project_out_unit(&mut v, qi);
            }
        }
        let v = v.normalize();
        p.ger(-1.0, &v, &v, 1.0);
        out.set_column(c, &v);
        q.push(v);
    }
    Ok(out)
}

/// ((n−K−2)/2)·log(n − d²) + κ·d, unnormalized; −∞ outside |d| < √n.
pub fn latitude_log_density(d: f64, params: &SphereSliceParams) -> f64 {
    let n = params.n as f64;
    let room = n - d * d;
    if !(room > 0.0) {
        return f64::NEG_INFINITY;
    }
    let expo = 0.5 * (params.n as f64 - params.k as f64 - 2.0);
    let base = if expo == 0.0 { 0.0 } else { expo * room.ln() };
    base + params.concentration() * d
}

/// Metropolis on φ with d = √n·sin φ.
///
/// The random-walk step is reflected at ±π/2 and is a multiplier times the curvature scale of the target at its
/// mode. During burn-in the multiplier follows a Robbins–Monro recursion
/// toward the target acceptance rate; afterwards it is frozen.
#[derive(Debug, Clone)]
pub struct LatitudeSampler {
    log_mult: f64,
    adapting: bool,
    adapt_steps: u64,
    accepted: u64,
    proposed: u64,
    /// Metropolis steps per row update.
    pub inner_steps: usize,
    pub target_acceptance: f64,
}

impl Default for LatitudeSampler {
    fn default() -> Self {
        Self::new(false)
    }
}

impl LatitudeSampler {
    pub fn new(adapt: bool) -> Self {
        Self {
            log_mult: 2.4f64.ln(),
            adapting: adapt,
            adapt_steps: 0,
            accepted: 0,
            proposed: 0,
            inner_steps: 1,
            target_acceptance: 0.4,
        }
    }

    pub fn with_inner_steps(mut self, steps: usize) -> Self {
        self.inner_steps = steps.max(1);
        self
    }

    /// Stop adapting and reset the acceptance counters.
    pub fn freeze(&mut self) {
        self.adapting = false;
        self.accepted = 0;
        self.proposed = 0;
    }

    pub fn is_adapting(&self) -> bool {
        self.adapting
    }

    pub fn step_multiplier(&self) -> f64 {
        self.log_mult.exp()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Mode and curvature scale of the φ-target (n−K−1)·log cos φ + κ√n·sin φ.
    fn laplace_approximation(params: &SphereSliceParams) -> (f64, f64) {
        let m = params.n as f64 - params.k as f64 - 1.0;
        let kr = params.concentration() * (params.n as f64).sqrt();
        let s = if kr > 0.0 {
            (-m + (m * m + 4.0 * kr * kr).sqrt()) / (2.0 * kr)
        } else {
            0.0
        };
        let h = m / (1.0 - s * s).max(1e-300) + kr * s;
        let scale = if h > 0.0 {
            (1.0 / h.sqrt()).min(std::f64::consts::PI)
        } else {
            std::f64::consts::PI
        };
        (s.clamp(-1.0, 1.0).asin(), scale)
    }

    /// Run `inner_steps` Metropolis rounds from `current_d`. Each round is a
    /// Cauchy independence proposal centred at the mode followed by a
    /// reflected random-walk proposal; only the latter is adapted.
    pub fn sample<R: Rng + ?Sized>(&mut self, params: &SphereSliceParams, current_d: f64, rng: &mut R) -> f64 {
        let sqrt_n = (params.n as f64).sqrt();
        let m = params.n as f64 - params.k as f64 - 1.0;
        let kr = params.concentration() * sqrt_n;
        let target = |phi: f64| {
            let c = phi.cos();
            let base = if m == 0.0 {
                0.0
            } else if c > 0.0 {
                m * c.ln()
            } else {
                return f64::NEG_INFINITY;
            };
            base + kr * phi.sin()
        };
        let half_pi = std::f64::consts::FRAC_PI_2;
        let mut phi = (current_d / sqrt_n).clamp(-1.0, 1.0).asin();
        let mut cur = target(phi);
        let (mode, scale) = Self::laplace_approximation(params);
        let ind_scale = INDEPENDENCE_WIDTH * scale;
        let log_q = |x: f64| -((x - mode) / ind_scale).powi(2).ln_1p();
        for _ in 0..self.inner_steps {
            let prop = mode + ind_scale * (std::f64::consts::PI * (uniform_open(rng) - 0.5)).tan();
            if prop.abs() < half_pi {
                let val = target(prop);
                if val.is_finite() && uniform_open(rng).ln() < val - cur + log_q(phi) - log_q(prop) {
                    phi = prop;
                    cur = val;
                }
            }

            let step = self.log_mult.exp() * scale;
            let mut prop = phi + step * std_normal(rng);
            // Reflect into [−π/2, π/2].
            let period = 2.0 * std::f64::consts::PI;
            prop = (prop + half_pi).rem_euclid(period);
            if prop > std::f64::consts::PI {
                prop = period - prop;
            }
            prop -= half_pi;
            let val = target(prop);
            let accept = val.is_finite() && uniform_open(rng).ln() < val - cur;
            if accept {
                phi = prop;
                cur = val;
            }
            self.proposed += 1;
            self.accepted += accept as u64;
            if self.adapting {
                self.adapt_steps += 1;
                let gain = (self.adapt_steps as f64).powf(-0.6);
                self.log_mult += gain * (accept as u8 as f64 - self.target_acceptance);
                self.log_mult = self.log_mult.clamp(-10.0, 3.0);
            }
        }
        sqrt_n * phi.sin()
    }
}

/// One latitude update; see [`LatitudeSampler`].
pub fn sample_latitude<R: Rng + ?Sized>(
    params: &SphereSliceParams,
    current_d: f64,
    sampler: &mut LatitudeSampler,
    rng: &mut R,
) -> f64 {
    sampler.sample(params, current_d, rng)
}

/// Ω̄_{k·}, σ̄²_k and the projected norm, or `None` when B_{·k} is numerically zero.
pub fn sphere_slice_params(
    k: usize,
    b: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    sigma2: &DVector<f64>,
    y: &ObservationMatrix,
) -> Option<SphereSliceParams> {
    let (k_dim, n) = omega.shape();
    let bk = b.column(k);
    if bk.norm() < ZERO_LOADING {
        return None;
    }
    let w = bk.component_div(sigma2);
    let prec = bk.dot(&w);
    let sigma_bar_sq = 1.0 / prec;
    // (Y − Σ_{t≠k} B_{·t}Ω_{t·})ᵀ Σ⁻¹ B_{·k}
    let mut mean: DVector<f64> = y.data_t() * &w;
    let btw = b.transpose() * &w;
    for t in 0..k_dim {
        if t != k {
            let coef = btw[t];
            for (mi, oi) in mean.iter_mut().zip(omega.row(t).iter()) {
                *mi -= coef * oi;
            }
        }
    }
    mean *= sigma_bar_sq;
    let mut proj = mean.clone();
    project_out_rows(&mut proj, omega, Some(k), n as f64);
    Some(SphereSliceParams {
        mean_row: mean,
        sigma_bar_sq,
        proj_norm: proj.norm(),
        n,
        k: k_dim,
    })
}

/// Unit vector uniform on the sphere of the complement of Ω_{−k} (and of `u`).
fn complement_direction<R: Rng + ?Sized>(
    omega: &DMatrix<f64>,
    k: usize,
    u: Option<&DVector<f64>>,
    rng: &mut R,
) -> DVector<f64> {
    let n = omega.ncols();
    loop {
        let mut v = DVector::from_fn(n, |_, _| std_normal(rng));
        project_out_rows(&mut v, omega, Some(k), n as f64);
        if let Some(u) = u {
            project_out_unit(&mut v, u);
            project_out_unit(&mut v, u);
        }
        let nrm = v.norm();
        if nrm > 1e-8 {
            return v / nrm;
        }
    }
}

/// Redraw row k of Ω from its conditional on the √n-sphere orthogonal to the
/// other rows. Requires n ≥ K + 1.
pub fn update_factor_row_orthonormal<R: Rng + ?Sized>(
    k: usize,
    b: &DMatrix<f64>,
    omega: &mut DMatrix<f64>,
    sigma2: &DVector<f64>,
    y: &ObservationMatrix,
    sampler: &mut LatitudeSampler,
    rng: &mut R,
) -> Result<()> {
    let (k_dim, n) = omega.shape();
    if n < k_dim + 1 {
        return Err(Error::Invalid(format!("orthonormal factors need n >= K + 1 (n = {n}, K = {k_dim})")));
    }
    let sqrt_n = (n as f64).sqrt();
    let new_row = match sphere_slice_params(k, b, omega, sigma2, y) {
        None => complement_direction(omega, k, None, rng) * sqrt_n,
        Some(params) => {
            let u = if params.proj_norm > 0.0 {
                let mut u = params.mean_row.clone();
                project_out_rows(&mut u, omega, Some(k), n as f64);
                u / params.proj_norm
            } else {
                complement_direction(omega, k, None, rng)
            };
            let current: DVector<f64> = omega.row(k).transpose();
            let d0 = current.dot(&u).clamp(-sqrt_n * (1.0 - 1e-15), sqrt_n * (1.0 - 1e-15));
            let d = sampler.sample(&params, d0, rng);
            let w = complement_direction(omega, k, Some(&u), rng);
            let radial = (n as f64 - d * d).max(0.0).sqrt();
            &u * d + w * radial
        }
    };
    let mut row = new_row;
    project_out_rows(&mut row, omega, Some(k), n as f64);
    let nrm = row.norm();
    if !(nrm > 0.0 && nrm.is_finite()) {
        return Err(Error::Numerical(format!("factor row {} collapsed during re-orthogonalization", k + 1)));
    }
    row *= sqrt_n / nrm;
    omega.set_row(k, &row.transpose());
    Ok(())
}

/// Ω-step of the orthonormal sampler: rows k = 1..K in order.
pub fn update_factors_orthonormal<R: Rng + ?Sized>(
    state: &mut ChainState,
    y: &ObservationMatrix,
    sampler: &mut LatitudeSampler,
    rng: &mut R,
) -> Result<()> {
    if state.mode != FactorMode::Orthonormal {
        return Err(Error::Invalid("orthonormal factor update requires orthonormal mode".into()));
    }
    for k in 0..state.k() {
        update_factor_row_orthonormal(k, &state.b, &mut state.omega, &state.sigma2, y, sampler, rng)?;
    }
    Ok(())
}

/// One scan: B, Ω (row by row on the manifold), Γ, Θ, Σ. Group moves are
/// rejected because ‖Ω_{k·}‖ is pinned.
pub fn gibbs_sweep_orthonormal<R: Rng + ?Sized>(
    state: &mut ChainState,
    y: &ObservationMatrix,
    prior: &PriorSpec,
    options: &SweepOptions,
    sampler: &mut LatitudeSampler,
    rng: &mut R,
) -> Result<()> {
    if options.group_moves {
        return Err(Error::Invalid("scaling group moves are not defined for orthonormal factors".into()));
    }
    if state.mode != FactorMode::Orthonormal {
        return Err(Error::Invalid("gibbs_sweep_orthonormal requires orthonormal factor mode".into()));
    }
    state.check_dims(y)?;
    let plan = options.plan;
    if plan.loadings {
        update_loadings(state, y, prior, options.random_scan, rng)?;
    }
    if plan.factors {
        update_factors_orthonormal(state, y, sampler, rng)?;
    }
    if plan.allocation {
        update_allocation(state, prior, rng);
    }
    if plan.sparsity {
        update_sparsity(state, prior, rng);
    }
    if plan.variances {
        update_idio_variance(state, y, prior, rng);
    }
    state.sweep += 1;
    Ok(())
}
