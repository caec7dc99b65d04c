//! Domain types shared by every sampler: observations, hyperparameters, the
//! chain state, synthetic benchmark generation and covariate residualization.
//!
//! Conventions: `Y` is G×n (responses × samples), `B` is G×K, `Ω` is K×n,
//! `Γ` is G×K binary, `Θ` is stored as log θ_k (non-increasing in k) so that
//! sparsity weights far below the smallest positive double stay representable,
//! and `Σ` holds the G idiosyncratic variances σ_j².

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dist::std_normal;
use crate::error::{Error, Result};
use crate::linalg::uniform_stiefel_scaled;
use crate::special::{ln_gamma, log1m_exp, LN_SQRT_2PI};

/// Prior placed on the factor matrix Ω.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    /// ω_i ~ N(0, I_K) independently.
    Normal,
    /// Ω/√n uniform on the Stiefel manifold St(K, n).
    Orthonormal,
}

/// G×n data matrix, columns are samples.
#[derive(Debug, Clone)]
pub struct ObservationMatrix {
    data: DMatrix<f64>,
    data_t: DMatrix<f64>,
    pub row_labels: Option<Vec<String>>,
    pub col_labels: Option<Vec<String>>,
}

impl ObservationMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Dimension("observation matrix must have G >= 1 and n >= 1".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::Invalid(format!("non-finite observation at row {}, column {}", r + 1, c + 1)));
        }
        let data_t = data.transpose();
        Ok(Self {
            data,
            data_t,
            row_labels: None,
            col_labels: None,
        })
    }

    pub fn with_labels(mut self, rows: Option<Vec<String>>, cols: Option<Vec<String>>) -> Self {
        self.row_labels = rows;
        self.col_labels = cols;
        self
    }

    /// Number of responses G.
    pub fn g(&self) -> usize {
        self.data.nrows()
    }

    /// Number of samples n.
    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// n×G transpose; column j is response j's sample vector.
    pub fn data_t(&self) -> &DMatrix<f64> {
        &self.data_t
    }
}

/// Hyperparameters of the spike-and-slab factor model and of the
/// column-magnitude (Ghosh–Dunson style) variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    /// Spike Laplace rate λ₀.
    pub lambda0: f64,
    /// Slab Laplace rate λ₁.
    pub lambda1: f64,
    /// Stick-breaking Beta(α, 1) parameter.
    pub alpha: f64,
    /// σ_j² ~ Inverse-Gamma(η/2, ηε/2).
    pub eta: f64,
    pub epsilon: f64,
    /// Precision of the normal prior on column magnitudes r_k.
    pub gd_lambda: f64,
    /// Spike precision for normalized loadings q_jk.
    pub gd_lambda0: f64,
    /// Slab precision for normalized loadings q_jk.
    pub gd_lambda1: f64,
}

impl PriorSpec {
    /// Defaults for a data set with `g` responses: α = 1/G, η = ε = 1,
    /// λ₀ = 20, λ₁ = 0.001, and λ = 0.001, λ₀ = 200, λ₁ = 1 for the
    /// column-magnitude model.
    pub fn defaults_for(g: usize) -> Self {
        Self {
            lambda0: 20.0,
            lambda1: 0.001,
            alpha: 1.0 / g.max(1) as f64,
            eta: 1.0,
            epsilon: 1.0,
            gd_lambda: 0.001,
            gd_lambda0: 200.0,
            gd_lambda1: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("alpha", self.alpha),
            ("eta", self.eta),
            ("epsilon", self.epsilon),
            ("gd_lambda", self.gd_lambda),
            ("gd_lambda0", self.gd_lambda0),
            ("gd_lambda1", self.gd_lambda1),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!("prior field {name} must be finite and > 0, got {v}")));
            }
        }
        if self.lambda0 <= self.lambda1 {
            return Err(Error::Invalid(format!(
                "spike rate lambda0 ({}) must exceed slab rate lambda1 ({})",
                self.lambda0, self.lambda1
            )));
        }
        Ok(())
    }

    /// Laplace rate selected by an allocation indicator.
    #[inline]
    pub fn rate(&self, slab: bool) -> f64 {
        if slab {
            self.lambda1
        } else {
            self.lambda0
        }
    }

    /// Normal precision selected by an allocation indicator (column-magnitude model).
    #[inline]
    pub fn gd_precision(&self, slab: bool) -> f64 {
        if slab {
            self.gd_lambda1
        } else {
            self.gd_lambda0
        }
    }
}

/// Full MCMC state of a spike-and-slab factor chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// G×K loading matrix.
    pub b: DMatrix<f64>,
    /// K×n factor matrix.
    pub omega: DMatrix<f64>,
    /// G×K feature allocation.
    pub gamma: DMatrix<bool>,
    /// log θ_k, non-increasing.
    pub log_theta: Vec<f64>,
    /// σ_j², strictly positive.
    pub sigma2: DVector<f64>,
    pub sweep: u64,
    pub mode: FactorMode,
}

impl ChainState {
    pub fn k(&self) -> usize {
        self.b.ncols()
    }

    pub fn g(&self) -> usize {
        self.b.nrows()
    }

    pub fn n(&self) -> usize {
        self.omega.ncols()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.log_theta.iter().map(|l| l.exp()).collect()
    }

    pub fn check_dims(&self, y: &ObservationMatrix) -> Result<()> {
        let (g, k) = self.b.shape();
        if g != y.g() {
            return Err(Error::Dimension(format!("B has {g} rows but Y has {}", y.g())));
        }
        if self.omega.shape() != (k, y.n()) {
            return Err(Error::Dimension(format!(
                "Omega is {}x{}, expected {k}x{}",
                self.omega.nrows(),
                self.omega.ncols(),
                y.n()
            )));
        }
        if self.gamma.shape() != (g, k) {
            return Err(Error::Dimension("Gamma shape differs from B".into()));
        }
        if self.log_theta.len() != k {
            return Err(Error::Dimension("Theta length differs from K".into()));
        }
        if self.sigma2.len() != g {
            return Err(Error::Dimension("Sigma length differs from G".into()));
        }
        if let Some(j) = self.sigma2.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid(format!("sigma2[{}] is not strictly positive", j + 1)));
        }
        Ok(())
    }

    /// Residual matrix Y − BΩ in n×G layout (column j belongs to response j).
    pub fn residual_t(&self, y: &ObservationMatrix) -> DMatrix<f64> {
        let mut r = y.data_t().clone();
        r.gemm(-1.0, &self.omega.transpose(), &self.b.transpose(), 1.0);
        r
    }
}

/// log[(1−γ)ψ(β|λ₀) + γψ(β|λ₁)] with ψ(β|λ) = (λ/2) exp(−λ|β|).
pub fn spsl_log_density(beta: f64, slab: bool, prior: &PriorSpec) -> f64 {
    let rate = prior.rate(slab);
    (0.5 * rate).ln() - rate * beta.abs()
}

/// log p(Θ) for θ_k = ∏_{l≤k} ν_l, ν_l ~ Beta(α, 1):
/// K log α + (α − 1) log θ_K − Σ_{k<K} log θ_k on the ordered set.
pub fn log_sparsity_prior(log_theta: &[f64], alpha: f64) -> f64 {
    let k = log_theta.len();
    if k == 0 {
        return 0.0;
    }
    for w in log_theta.windows(2) {
        if w[1] > w[0] {
            return f64::NEG_INFINITY;
        }
    }
    if log_theta[0] > 0.0 {
        return f64::NEG_INFINITY;
    }
    k as f64 * alpha.ln() + (alpha - 1.0) * log_theta[k - 1] - log_theta[..k - 1].iter().sum::<f64>()
}

/// log of the Inverse-Gamma(η/2, ηε/2) density at σ².
pub fn log_variance_prior(sigma2: f64, prior: &PriorSpec) -> f64 {
    let a = 0.5 * prior.eta;
    let b = 0.5 * prior.eta * prior.epsilon;
    a * b.ln() - ln_gamma(a) - (a + 1.0) * sigma2.ln() - b / sigma2
}

/// Gaussian log likelihood log f(Y | B, Ω, Σ).
pub fn log_likelihood(state: &ChainState, y: &ObservationMatrix) -> f64 {
    let r = state.residual_t(y);
    let n = y.n() as f64;
    let mut total = 0.0;
    for j in 0..y.g() {
        let s2 = state.sigma2[j];
        let rss = r.column(j).norm_squared();
        total += -n * (LN_SQRT_2PI + 0.5 * s2.ln()) - 0.5 * rss / s2;
    }
    total
}

/// Unnormalized log posterior f(Y|B,Ω,Σ) f(Ω) p(B|Γ) p(Γ|Θ) p(Θ) p(Σ).
///
/// In orthonormal mode the (constant) Stiefel density of Ω is dropped.
pub fn log_joint_posterior(state: &ChainState, y: &ObservationMatrix, prior: &PriorSpec) -> Result<f64> {
    state.check_dims(y)?;
    let mut total = log_likelihood(state, y);

    if state.mode == FactorMode::Normal {
        let kn = state.omega.len() as f64;
        total += -kn * LN_SQRT_2PI - 0.5 * state.omega.norm_squared();
    }

    for k in 0..state.k() {
        let lt = state.log_theta[k];
        let l1t = log1m_exp(lt);
        for j in 0..state.g() {
            let slab = state.gamma[(j, k)];
            total += spsl_log_density(state.b[(j, k)], slab, prior);
            total += if slab { lt } else { l1t };
        }
    }
    total += log_sparsity_prior(&state.log_theta, prior.alpha);
    total += state.sigma2.iter().map(|&s| log_variance_prior(s, prior)).sum::<f64>();
    Ok(total)
}

/// Data-generating parameters of a synthetic benchmark.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub b0: DMatrix<f64>,
    pub omega0: DMatrix<f64>,
    pub sigma0: DVector<f64>,
    pub support: DMatrix<bool>,
}

/// Layout of the block-structured synthetic benchmark. Defaults: G = 1956,
/// n = 100, K₀ = 5, blocks of 500 ones shifted by 364 rows per column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub g: usize,
    pub n: usize,
    pub k0: usize,
    pub block_len: usize,
    pub stride: usize,
    pub seed: u64,
    pub factor_mode: FactorMode,
    /// Standard deviation multiplier for the noise; 1 reproduces Σ₀ = I.
    pub noise_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            g: 1956,
            n: 100,
            k0: 5,
            block_len: 500,
            stride: 364,
            seed: 1,
            factor_mode: FactorMode::Normal,
            noise_scale: 1.0,
        }
    }
}

impl SyntheticSpec {
    /// The same design shrunk by `factor` in G, block length, stride and n.
    pub fn scaled_down(factor: usize) -> Self {
        let d = Self::default();
        Self {
            g: d.g / factor,
            n: d.n / factor,
            block_len: d.block_len / factor,
            stride: d.stride / factor,
            ..d
        }
    }
}

/// Y = B₀Ω₀ + E with block-diagonal 0/1 loadings, Σ₀ = I.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ObservationMatrix, SyntheticTruth)> {
    let SyntheticSpec {
        g,
        n,
        k0,
        block_len,
        stride,
        seed,
        factor_mode,
        noise_scale,
    } = *spec;
    if g == 0 || n == 0 || k0 == 0 || block_len == 0 {
        return Err(Error::Invalid("synthetic dimensions must be positive".into()));
    }
    if stride * (k0 - 1) + block_len > g {
        return Err(Error::Invalid(format!(
            "block layout needs {} rows but G = {g}",
            stride * (k0 - 1) + block_len
        )));
    }
    if factor_mode == FactorMode::Orthonormal && k0 > n {
        return Err(Error::Invalid("orthonormal factors need K0 <= n".into()));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Invalid("noise_scale must be finite and >= 0".into()));
    }
    let mut support = DMatrix::from_element(g, k0, false);
    let mut b0 = DMatrix::zeros(g, k0);
    for k in 0..k0 {
        for j in stride * k..stride * k + block_len {
            support[(j, k)] = true;
            b0[(j, k)] = 1.0;
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let omega0 = match factor_mode {
        FactorMode::Normal => DMatrix::from_fn(k0, n, |_, _| std_normal(&mut rng)),
        FactorMode::Orthonormal => uniform_stiefel_scaled(k0, n, &mut rng),
    };
    let mut y = &b0 * &omega0;
    // Noise drawn column by column (sample i, then response j).
    for i in 0..n {
        for j in 0..g {
            y[(j, i)] += noise_scale * std_normal(&mut rng);
        }
    }
    let truth = SyntheticTruth {
        b0,
        omega0,
        sigma0: DVector::from_element(g, 1.0),
        support,
    };
    Ok((ObservationMatrix::new(y)?, truth))
}

/// Least-squares residuals of each response row on an intercept plus the
/// given n×p covariates. Covariates are standardized first; residuals are
/// unaffected by that.
pub fn residualize(y_raw: &ObservationMatrix, covariates: &DMatrix<f64>) -> Result<ObservationMatrix> {
    let n = y_raw.n();
    if covariates.nrows() != n && covariates.ncols() > 0 {
        return Err(Error::Dimension(format!(
            "covariates have {} rows but data has {n} samples",
            covariates.nrows()
        )));
    }
    let p = covariates.ncols();
    if p + 1 >= n {
        return Err(Error::Invalid(format!("need p + 1 < n, got p = {p}, n = {n}")));
    }
    // Orthonormal basis of span{1, covariates} by two-pass Gram–Schmidt.
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(p + 1);
    let intercept = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    basis.push(intercept);
    for c in 0..p {
        let col = covariates.column(c);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::RankDeficient {
                column: c + 1,
                name: format!("covariate {} (constant, collinear with intercept)", c + 1),
            });
        }
        let mut v = DVector::from_iterator(n, col.iter().map(|x| (x - mean) / sd));
        let orig = v.norm();
        for _ in 0..2 {
            for q in &basis {
                let d = v.dot(q);
                v.axpy(-d, q, 1.0);
            }
        }
        let nrm = v.norm();
        if nrm < 1e-10 * orig {
            return Err(Error::RankDeficient {
                column: c + 1,
                name: format!("covariate {}", c + 1),
            });
        }
        basis.push(v / nrm);
    }
    let mut out = y_raw.data().clone();
    for mut row in out.row_iter_mut() {
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = row.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
                for (ri, qi) in row.iter_mut().zip(q.iter()) {
                    *ri -= d * qi;
                }
            }
        }
    }
    Ok(ObservationMatrix::new(out)?.with_labels(y_raw.row_labels.clone(), y_raw.col_labels.clone()))
}
