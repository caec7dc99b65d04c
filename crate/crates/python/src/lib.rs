use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use orthofactor::config::{parse_config, ModelKind};
use orthofactor::diagnostics;
use orthofactor::map::{self, EmOptions, LadderSchedule, MapEstimate};
use orthofactor::model::{generate_synthetic, FactorMode, ObservationMatrix, PriorSpec, SyntheticSpec};
use orthofactor::pipeline::{run_pipeline, Chain};
use orthofactor::sampler::normal::{sample_trunc_norm_mixture, TruncNormMixtureParams};
use orthofactor::Error;

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &Rows, what: &str) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err(format!("{what}: rows have unequal length")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn observations(y: &Rows) -> PyResult<ObservationMatrix> {
    ObservationMatrix::new(matrix(y, "y")?).map_err(to_py)
}

fn model_kind(name: &str) -> PyResult<ModelKind> {
    ModelKind::parse(name).ok_or_else(|| {
        let known: Vec<&str> = ModelKind::ALL.iter().map(|m| m.as_str()).collect();
        PyValueError::new_err(format!("unknown model {name:?}; expected one of {known:?}"))
    })
}

/// Hyperparameters of the loading, sparsity and variance priors.
#[pyclass(name = "Prior", from_py_object)]
#[derive(Clone)]
struct PyPrior {
    #[pyo3(get, set)]
    lambda0: f64,
    #[pyo3(get, set)]
    lambda1: f64,
    #[pyo3(get, set)]
    alpha: f64,
    #[pyo3(get, set)]
    eta: f64,
    #[pyo3(get, set)]
    epsilon: f64,
    #[pyo3(get, set)]
    gd_lambda: f64,
    #[pyo3(get, set)]
    gd_lambda0: f64,
    #[pyo3(get, set)]
    gd_lambda1: f64,
}

impl From<PriorSpec> for PyPrior {
    fn from(p: PriorSpec) -> Self {
        Self {
            lambda0: p.lambda0,
            lambda1: p.lambda1,
            alpha: p.alpha,
            eta: p.eta,
            epsilon: p.epsilon,
            gd_lambda: p.gd_lambda,
            gd_lambda0: p.gd_lambda0,
            gd_lambda1: p.gd_lambda1,
        }
    }
}

impl PyPrior {
    fn spec(&self) -> PyResult<PriorSpec> {
        let p = PriorSpec {
            lambda0: self.lambda0,
            lambda1: self.lambda1,
            alpha: self.alpha,
            eta: self.eta,
            epsilon: self.epsilon,
            gd_lambda: self.gd_lambda,
            gd_lambda0: self.gd_lambda0,
            gd_lambda1: self.gd_lambda1,
        };
        p.validate().map_err(to_py)?;
        Ok(p)
    }
}

#[pymethods]
impl PyPrior {
    /// Defaults for `g` responses.
    #[new]
    fn new(g: usize) -> Self {
        PriorSpec::defaults_for(g).into()
    }

    fn __repr__(&self) -> String {
        format!(
            "Prior(lambda0={}, lambda1={}, alpha={}, eta={}, epsilon={})",
            self.lambda0, self.lambda1, self.alpha, self.eta, self.epsilon
        )
    }
}

/// A posterior mode found by EM.
#[pyclass(name = "MapEstimate", frozen)]
struct PyMapEstimate {
    inner: MapEstimate,
}

#[pymethods]
impl PyMapEstimate {
    #[getter]
    fn b_hat(&self) -> Rows {
        rows(&self.inner.b_hat)
    }
    #[getter]
    fn sigma_hat(&self) -> Vec<f64> {
        self.inner.sigma_hat.iter().copied().collect()
    }
    #[getter]
    fn theta_hat(&self) -> Vec<f64> {
        self.inner.theta_hat.clone()
    }
    #[getter]
    fn k_hat(&self) -> usize {
        self.inner.k_hat
    }
    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }
    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    fn __repr__(&self) -> String {
        format!(
            "MapEstimate(K={}, k_hat={}, objective={:.4}, converged={})",
            self.inner.b_hat.ncols(),
            self.inner.k_hat,
            self.inner.objective,
            self.inner.converged
        )
    }
}

/// Block-structured synthetic data. Returns (y, b0, omega0, support) as nested lists.
#[pyfunction]
#[pyo3(signature = (g=1956, n=100, k0=5, block_len=500, stride=364, seed=1, orthonormal=false, noise_scale=1.0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    g: usize,
    n: usize,
    k0: usize,
    block_len: usize,
    stride: usize,
    seed: u64,
    orthonormal: bool,
    noise_scale: f64,
) -> PyResult<(Rows, Rows, Rows, Vec<Vec<bool>>)> {
    let spec = SyntheticSpec {
        g,
        n,
        k0,
        block_len,
        stride,
        seed,
        factor_mode: if orthonormal { FactorMode::Orthonormal } else { FactorMode::Normal },
        noise_scale,
    };
    let (y, truth) = generate_synthetic(&spec).map_err(to_py)?;
    let support = truth.support.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok((rows(y.data()), rows(&truth.b0), rows(&truth.omega0), support))
}

/// EM from the rotated SVD start with K columns.
#[pyfunction]
#[pyo3(signature = (y, k, prior=None, max_iter=500, tol=1e-6, parameter_expansion=true))]
fn em_map(y: Rows, k: usize, prior: Option<PyPrior>, max_iter: usize, tol: f64, parameter_expansion: bool) -> PyResult<PyMapEstimate> {
    let y = observations(&y)?;
    let prior = prior.unwrap_or_else(|| PriorSpec::defaults_for(y.g()).into()).spec()?;
    let opts = EmOptions { max_iter, tol, parameter_expansion };
    let init = map::svd_init(&y, k, &prior).map_err(to_py)?;
    let inner = map::em_map(&y, &prior, init, &opts).map_err(to_py)?;
    Ok(PyMapEstimate { inner })
}

/// Warm-started EM along an increasing λ₀ sequence. Returns every stage.
#[pyfunction]
#[pyo3(signature = (y, k, lambda0_sequence=vec![12.0, 15.0, 20.0, 30.0, 40.0], lambda1=0.001, stabilization_tol=0.01, prior=None, max_iter=500, run_all=false))]
#[allow(clippy::too_many_arguments)]
fn run_ladder(
    y: Rows,
    k: usize,
    lambda0_sequence: Vec<f64>,
    lambda1: f64,
    stabilization_tol: f64,
    prior: Option<PyPrior>,
    max_iter: usize,
    run_all: bool,
) -> PyResult<Vec<(f64, f64, PyMapEstimate)>> {
    let y = observations(&y)?;
    let prior = prior.unwrap_or_else(|| PriorSpec::defaults_for(y.g()).into()).spec()?;
    let schedule = LadderSchedule {
        lambda1,
        lambda0_sequence,
        stabilization_tol,
    };
    let opts = EmOptions {
        max_iter,
        parameter_expansion: true,
        ..EmOptions::default()
    };
    let path = map::run_ladder(&y, &schedule, &prior, k, &opts, run_all).map_err(to_py)?;
    Ok(path
        .lambda0
        .into_iter()
        .zip(path.relative_changes)
        .zip(path.stages)
        .map(|((l, c), inner)| (l, c, PyMapEstimate { inner }))
        .collect())
}

/// One Gibbs chain over fixed data.
#[pyclass(name = "Sampler")]
struct PySampler {
    chain: Chain,
    y: ObservationMatrix,
    prior: PriorSpec,
    rng: ChaCha20Rng,
    sweeps: u64,
}

#[pymethods]
impl PySampler {
    /// Start `model` at a mode estimate; Ω and Γ are drawn and refreshed.
    #[new]
    #[pyo3(signature = (model, y, start, prior=None, seed=1, adaptive_k=false))]
    fn new(model: &str, y: Rows, start: &PyMapEstimate, prior: Option<PyPrior>, seed: u64, adaptive_k: bool) -> PyResult<Self> {
        let model = model_kind(model)?;
        let y = observations(&y)?;
        let prior = prior.unwrap_or_else(|| PriorSpec::defaults_for(y.g()).into()).spec()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let est = &start.inner;
        let chain = Chain::from_estimate(model, &est.b_hat, &est.sigma_hat, &est.theta_hat, &y, &prior, adaptive_k, &mut rng)
            .map_err(to_py)?;
        Ok(Self {
            chain,
            y,
            prior,
            rng,
            sweeps: 0,
        })
    }

    /// Run `count` sweeps. Returns the number done so far.
    #[pyo3(signature = (count=1))]
    fn step(&mut self, count: u64) -> PyResult<u64> {
        for _ in 0..count {
            self.chain.step(&self.y, &self.prior, &mut self.rng).map_err(to_py)?;
            self.sweeps += 1;
        }
        Ok(self.sweeps)
    }

    /// Freeze the latitude step size (end of burn-in).
    fn freeze(&mut self) {
        self.chain.latitude.freeze();
    }

    #[getter]
    fn k(&self) -> usize {
        self.chain.k()
    }
    #[getter]
    fn sweeps(&self) -> u64 {
        self.sweeps
    }
    fn loadings(&self) -> Rows {
        rows(&self.chain.loadings())
    }
    fn factors(&self) -> Rows {
        rows(self.chain.omega())
    }
    fn sigma2(&self) -> Vec<f64> {
        self.chain.sigma2().iter().copied().collect()
    }
    /// (a, b, c) of the conditional of loading (j, k), 0-based.
    fn conditional(&self, j: usize, k: usize) -> Option<(f64, f64, f64)> {
        self.chain.conditional(j, k, &self.y, &self.prior).map(|p| (p.a, p.b, p.c))
    }
    #[getter]
    fn latitude_acceptance(&self) -> f64 {
        self.chain.latitude.acceptance_rate()
    }
}

/// Draws from the density ∝ exp(−aβ² + bβ − c|β|).
#[pyfunction]
#[pyo3(signature = (a, b, c, size, seed=1))]
fn sample_mixture(a: f64, b: f64, c: f64, size: usize, seed: u64) -> PyResult<Vec<f64>> {
    let params = TruncNormMixtureParams::new(a, b, c).map_err(to_py)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..size).map(|_| sample_trunc_norm_mixture(&params, &mut rng)).collect())
}

/// Distance between row spaces after orthonormalization: sqrt(K − ‖V₁V₂ᵀ‖²_F).
#[pyfunction]
fn column_space_angle(reference: Rows, test: Rows) -> PyResult<f64> {
    let v1 = diagnostics::lq_decompose(&matrix(&reference, "reference")?).map_err(to_py)?.v_mat;
    let v2 = diagnostics::lq_decompose(&matrix(&test, "test")?).map_err(to_py)?.v_mat;
    diagnostics::column_space_angle(&v1, &v2).map_err(to_py)
}

/// Effective sample size; returns (ess, flag) with flag None, "constant" or "clipped".
#[pyfunction]
fn effective_sample_size(trace: Vec<f64>) -> PyResult<(f64, Option<&'static str>)> {
    let est = diagnostics::effective_sample_size(&trace).map_err(to_py)?;
    let flag = est.flag.map(|f| match f {
        diagnostics::EssFlag::ConstantTrace => "constant",
        diagnostics::EssFlag::Clipped => "clipped",
    });
    Ok((est.ess, flag))
}

/// Run a simulate, fit or diagnose configuration file.
#[pyfunction]
fn run_config(path: std::path::PathBuf) -> PyResult<()> {
    let cfg = parse_config(&path).map_err(to_py)?;
    run_pipeline(&cfg).map_err(to_py)
}

/// Orthonormality defect max|ΩΩᵀ − nI|.
#[pyfunction]
fn orthonormality_defect(omega: Rows) -> PyResult<f64> {
    Ok(orthofactor::linalg::orthonormality_defect(&matrix(&omega, "omega")?))
}

#[pymodule]
pub fn orthofactor_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPrior>()?;
    m.add_class::<PyMapEstimate>()?;
    m.add_class::<PySampler>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(em_map, m)?)?;
    m.add_function(wrap_pyfunction!(run_ladder, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(column_space_angle, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    m.add_function(wrap_pyfunction!(orthonormality_defect, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
