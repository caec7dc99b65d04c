//! Chain construction, the sweep loop with its outputs, and the
//! simulate / fit / diagnose workflows behind the CLI.
//!
//! Output layout of `fit` (and `diagnose` for the summary files):
//!
//! ```text
//! output_dir/
//!   config_resolved.json  run_manifest.json  map_B.csv  ladder_stage_<t>.csv
//!   chain_<c>/trace_<param>.csv  summary.csv  density_<param>.csv
//!             rbparams_<param>.csv  angles.csv
//!             posterior_mean_B.csv  posterior_mean_sigma2.csv
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{parse_config_str, Command, FactorCount, InitMethod, ModelKind, RunConfig};
use crate::diagnostics::{column_space_angle, density_grid, lq_decompose, rao_blackwell_density, summarize};
use crate::dist::{std_normal, uniform_open};
use crate::error::{Error, Result};
use crate::io::{read_covariates, read_matrix, read_observations, write_columns, write_matrix};
use crate::linalg::{orthonormalize_rows, project_out_rows, uniform_stiefel_scaled};
use crate::map::{adapt_factor_count, em_map, run_ladder, svd_init, LadderPath, MapEstimate};
use crate::model::{generate_synthetic, residualize, ChainState, FactorMode, ObservationMatrix, PriorSpec, SyntheticTruth};
use crate::sampler::ghosh_dunson::{gd_q_conditional, gd_sweep, gd_update_allocation, GDState};
use crate::sampler::normal::{
    draw_factors_normal, gibbs_sweep_normal, loading_conditional_params, update_allocation, TruncNormMixtureParams,
};
use crate::sampler::orthonormal::{gibbs_sweep_orthonormal, update_factor_row_orthonormal, LatitudeSampler};
use crate::sampler::SweepOptions;
use crate::trace::TraceStore;

/// Per-chain seed from the master seed (splitmix64 on master + (c+1)·φ).
pub fn chain_seed(master: u64, chain: usize) -> u64 {
    let mut z = master.wrapping_add((chain as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub enum ChainKind {
    Spsl(ChainState),
    Gd(GDState),
}

/// A sampler state plus the per-chain tuning it carries between sweeps.
#[derive(Debug, Clone)]
pub struct Chain {
    pub model: ModelKind,
    pub state: ChainKind,
    pub latitude: LatitudeSampler,
    pub adaptive_k: bool,
    pub random_scan: bool,
}

/// Factor rows drawn from the prior: i.i.d. normal, or a uniform √n-frame.
fn prior_factors<R: Rng + ?Sized>(k: usize, n: usize, mode: FactorMode, rng: &mut R) -> DMatrix<f64> {
    match mode {
        FactorMode::Normal => DMatrix::from_fn(k, n, |_, _| std_normal(rng)),
        FactorMode::Orthonormal => uniform_stiefel_scaled(k, n, rng),
    }
}

/// Non-increasing log θ from arbitrary positive weights.
fn ordered_log_theta(theta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.len());
    let mut cap = 0.0f64;
    for &t in theta {
        cap = cap.min(t.clamp(1e-300, 1.0).ln());
        out.push(cap);
    }
    out
}

impl Chain {
    /// Wrap an SpSL state.
    pub fn spsl(model: ModelKind, state: ChainState, adaptive_k: bool) -> Result<Self> {
        if model.is_gd() {
            return Err(Error::Invalid("column-magnitude models need a GD state".into()));
        }
        if state.mode != model.factor_mode() {
            return Err(Error::Invalid(format!("{} needs {:?} factors", model.as_str(), model.factor_mode())));
        }
        Ok(Self {
            model,
            state: ChainKind::Spsl(state),
            latitude: LatitudeSampler::new(true),
            adaptive_k,
            random_scan: false,
        })
    }

    /// Start from (B, Σ, θ): Ω and Γ come from their priors, then Ω and Γ are
    /// refreshed from their conditionals so the first loading update sees
    /// factors that match B.
    pub fn from_estimate<R: Rng + ?Sized>(
        model: ModelKind,
        b: &DMatrix<f64>,
        sigma2: &DVector<f64>,
        theta: &[f64],
        y: &ObservationMatrix,
        prior: &PriorSpec,
        adaptive_k: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (g, k) = b.shape();
        let n = y.n();
        let mode = model.factor_mode();
        if mode == FactorMode::Orthonormal && n < k + 1 {
            return Err(Error::Invalid(format!("orthonormal factors need n >= K + 1 (n = {n}, K = {k})")));
        }
        let log_theta = ordered_log_theta(theta);
        let gamma = DMatrix::from_fn(g, k, |_, c| uniform_open(rng) < log_theta[c].exp());
        let omega = prior_factors(k, n, mode, rng);
        let mut latitude = LatitudeSampler::new(true);
        let state = if model.is_gd() {
            let r = DVector::from_fn(k, |c, _| {
                let m = b.column(c).amax();
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            });
            let q = DMatrix::from_fn(g, k, |j, c| b[(j, c)] / r[c]);
            let mut s = GDState {
                q,
                r,
                gamma,
                log_theta,
                sigma2: sigma2.clone(),
                omega,
                sweep: 0,
                mode,
            };
            refresh_factors(&s.loadings(), &mut s.omega, &s.sigma2, y, mode, &mut latitude, rng)?;
            gd_update_allocation(&mut s, prior, rng);
            ChainKind::Gd(s)
        } else {
            let mut s = ChainState {
                b: b.clone(),
                omega,
                gamma,
                log_theta,
                sigma2: sigma2.clone(),
                sweep: 0,
                mode,
            };
            refresh_factors(&s.b, &mut s.omega, &s.sigma2, y, mode, &mut latitude, rng)?;
            update_allocation(&mut s, prior, rng);
            ChainKind::Spsl(s)
        };
        Ok(Self {
            model,
            state,
            latitude,
            adaptive_k,
            random_scan: false,
        })
    }

    /// Start at the generating parameters, padded with null factors (or
    /// truncated) to K columns.
    pub fn from_truth<R: Rng + ?Sized>(
        model: ModelKind,
        truth: &SyntheticTruth,
        k: usize,
        adaptive_k: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (g, k0) = truth.b0.shape();
        let n = truth.omega0.ncols();
        let mode = model.factor_mode();
        let keep = k.min(k0);
        let mut b = DMatrix::zeros(g, k);
        let mut gamma = DMatrix::from_element(g, k, false);
        let mut omega = DMatrix::zeros(k, n);
        for c in 0..keep {
            b.set_column(c, &truth.b0.column(c));
            omega.set_row(c, &truth.omega0.row(c));
            for j in 0..g {
                gamma[(j, c)] = truth.support[(j, c)];
            }
        }
        if mode == FactorMode::Orthonormal {
            // Truth may come from normal factors; project onto the manifold.
            if keep > 0 {
                let mut head = omega.rows(0, keep).into_owned();
                orthonormalize_rows(&mut head, (n as f64).sqrt())?;
                omega.rows_mut(0, keep).copy_from(&head);
            }
        }
        for c in keep..k {
            let row = match mode {
                FactorMode::Normal => DVector::from_fn(n, |_, _| std_normal(rng)),
                FactorMode::Orthonormal => loop {
                    let mut v = DVector::from_fn(n, |_, _| std_normal(rng));
                    project_out_rows(&mut v, &omega.rows(0, c).into_owned(), None, n as f64);
                    let nrm = v.norm();
                    if nrm > 1e-8 {
                        break v * ((n as f64).sqrt() / nrm);
                    }
                },
            };
            omega.set_row(c, &row.transpose());
        }
        let theta: Vec<f64> = (0..k)
            .map(|c| {
                let s = gamma.column(c).iter().filter(|&&x| x).count();
                (s.max(1) as f64) / g as f64
            })
            .collect();
        let log_theta = ordered_log_theta(&theta);
        let state = if model.is_gd() {
            let r = DVector::from_fn(k, |c, _| if b.column(c).amax() > 0.0 { b.column(c).amax() } else { 1.0 });
            let q = DMatrix::from_fn(g, k, |j, c| b[(j, c)] / r[c]);
            ChainKind::Gd(GDState {
                q,
                r,
                gamma,
                log_theta,
                sigma2: truth.sigma0.clone(),
                omega,
                sweep: 0,
                mode,
            })
        } else {
            ChainKind::Spsl(ChainState {
                b,
                omega,
                gamma,
                log_theta,
                sigma2: truth.sigma0.clone(),
                sweep: 0,
                mode,
            })
        };
        Ok(Self {
            model,
            state,
            latitude: LatitudeSampler::new(true),
            adaptive_k,
            random_scan: false,
        })
    }

    /// One full sweep, then the factor-count rule when enabled.
    pub fn step<R: Rng + ?Sized>(&mut self, y: &ObservationMatrix, prior: &PriorSpec, rng: &mut R) -> Result<()> {
        let options = SweepOptions {
            group_moves: self.model.group_moves(),
            random_scan: self.random_scan,
            ..Default::default()
        };
        match &mut self.state {
            ChainKind::Spsl(s) => {
                match s.mode {
                    FactorMode::Normal => gibbs_sweep_normal(s, y, prior, &options, rng)?,
                    FactorMode::Orthonormal => gibbs_sweep_orthonormal(s, y, prior, &options, &mut self.latitude, rng)?,
                }
                if self.adaptive_k {
                    adapt_factor_count(s, prior.alpha, rng)?;
                }
            }
            ChainKind::Gd(s) => gd_sweep(s, y, prior, &mut self.latitude, rng)?,
        }
        Ok(())
    }

    pub fn loadings(&self) -> DMatrix<f64> {
        match &self.state {
            ChainKind::Spsl(s) => s.b.clone(),
            ChainKind::Gd(s) => s.loadings(),
        }
    }

    /// B_jk, or 0 when column k does not exist (adaptive K).
    pub fn loading(&self, j: usize, k: usize) -> f64 {
        match &self.state {
            ChainKind::Spsl(s) if k < s.k() => s.b[(j, k)],
            ChainKind::Gd(s) if k < s.k() => s.q[(j, k)] * s.r[k],
            _ => 0.0,
        }
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        match &self.state {
            ChainKind::Spsl(s) => &s.omega,
            ChainKind::Gd(s) => &s.omega,
        }
    }

    pub fn sigma2(&self) -> &DVector<f64> {
        match &self.state {
            ChainKind::Spsl(s) => &s.sigma2,
            ChainKind::Gd(s) => &s.sigma2,
        }
    }

    pub fn k(&self) -> usize {
        self.omega().nrows()
    }

    /// Full conditional of B_jk as exp(−aβ² + bβ − c|β|), when defined.
    pub fn conditional(&self, j: usize, k: usize, y: &ObservationMatrix, prior: &PriorSpec) -> Option<TruncNormMixtureParams> {
        match &self.state {
            ChainKind::Spsl(s) if k < s.k() => loading_conditional_params(j, k, s, y, prior).ok(),
            ChainKind::Gd(s) if k < s.k() && s.r[k] != 0.0 => {
                // B_jk = r_k q_jk with q_jk ~ N(m, 1/p).
                let (m, p) = gd_q_conditional(j, k, s, y, prior);
                let r = s.r[k];
                TruncNormMixtureParams::new(p / (2.0 * r * r), p * m / r, 0.0).ok()
            }
            _ => None,
        }
    }
}

/// A few passes of the Ω conditional given B and Σ.
fn refresh_factors<R: Rng + ?Sized>(
    b: &DMatrix<f64>,
    omega: &mut DMatrix<f64>,
    sigma2: &DVector<f64>,
    y: &ObservationMatrix,
    mode: FactorMode,
    latitude: &mut LatitudeSampler,
    rng: &mut R,
) -> Result<()> {
    match mode {
        FactorMode::Normal => *omega = draw_factors_normal(b, sigma2, y, rng)?,
        FactorMode::Orthonormal => {
            for _ in 0..5 {
                for k in 0..omega.nrows() {
                    update_factor_row_orthonormal(k, b, omega, sigma2, y, latitude, rng)?;
                }
            }
        }
    }
    Ok(())
}

/// Sweep counts and what to record.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSettings {
    pub sweeps: u64,
    pub burn_in: u64,
    pub thin: u64,
    /// 0-based (j, k) loading indices to trace.
    pub traced: Vec<(usize, usize)>,
}

/// Everything a finished chain reports.
#[derive(Debug)]
pub struct ChainOutput {
    pub trace: TraceStore,
    pub posterior_mean_b: DMatrix<f64>,
    pub posterior_mean_sigma2: DVector<f64>,
    /// Conditional parameters per traced entry at each retained sweep.
    pub rb_draws: Vec<Vec<(u64, TruncNormMixtureParams)>>,
    pub angles: Vec<(u64, f64)>,
    pub retained: usize,
    pub seconds: f64,
    pub chain: Chain,
}

pub fn entry_name(j: usize, k: usize) -> String {
    format!("b_{}_{}", j + 1, k + 1)
}

/// Run the sweep loop. Traces cover every kept sweep (burn-in included);
/// means, conditional parameters and the observer see only retained sweeps
/// after burn-in. The latitude sampler adapts during burn-in only.
pub fn run_chain<R: Rng + ?Sized>(
    mut chain: Chain,
    y: &ObservationMatrix,
    prior: &PriorSpec,
    settings: &ChainSettings,
    omega0: Option<&DMatrix<f64>>,
    sink: Option<&Path>,
    mut observer: Option<&mut dyn FnMut(u64, &Chain)>,
    rng: &mut R,
) -> Result<ChainOutput> {
    let start = Instant::now();
    let g = y.g();
    for &(j, _) in &settings.traced {
        if j >= g {
            return Err(Error::Invalid(format!("traced entry row {} exceeds G = {g}", j + 1)));
        }
    }
    let mut trace = match sink {
        Some(dir) => TraceStore::with_sink(settings.thin, dir)?,
        None => TraceStore::new(settings.thin)?,
    };
    let v0 = match omega0 {
        Some(o) => Some(lq_decompose(o)?.v_mat),
        None => None,
    };
    chain.latitude = LatitudeSampler::new(settings.burn_in > 0);
    let mut sum_b = DMatrix::zeros(g, chain.k());
    let mut sum_s2 = DVector::zeros(g);
    let mut rb = vec![Vec::new(); settings.traced.len()];
    let mut angles = Vec::new();
    let mut retained = 0usize;
    let names: Vec<String> = settings.traced.iter().map(|&(j, k)| entry_name(j, k)).collect();

    for s in 1..=settings.sweeps {
        chain.step(y, prior, rng)?;
        if s == settings.burn_in {
            chain.latitude.freeze();
        }
        if !trace.keeps(s) {
            continue;
        }
        let mut rec: Vec<(String, f64)> = settings
            .traced
            .iter()
            .zip(&names)
            .map(|(&(j, k), name)| (name.clone(), chain.loading(j, k)))
            .collect();
        rec.push(("K".into(), chain.k() as f64));
        trace.record(s, &rec)?;
        if let Some(v0) = &v0 {
            if let Ok(lq) = lq_decompose(chain.omega()) {
                angles.push((s, column_space_angle(&lq.v_mat, v0)?));
            }
        }
        if s <= settings.burn_in {
            continue;
        }
        retained += 1;
        let b = chain.loadings();
        if b.ncols() > sum_b.ncols() {
            let extra = b.ncols() - sum_b.ncols();
            let at = sum_b.ncols();
            sum_b = sum_b.insert_columns(at, extra, 0.0);
        }
        sum_b.columns_mut(0, b.ncols()).zip_apply(&b, |acc, v| *acc += v);
        sum_s2 += chain.sigma2();
        for (i, &(j, k)) in settings.traced.iter().enumerate() {
            if let Some(p) = chain.conditional(j, k, y, prior) {
                rb[i].push((s, p));
            }
        }
        if let Some(f) = observer.as_mut() {
            f(s, &chain);
        }
    }
    trace.flush()?;
    let w = 1.0 / retained.max(1) as f64;
    Ok(ChainOutput {
        trace,
        posterior_mean_b: sum_b * w,
        posterior_mean_sigma2: sum_s2 * w,
        rb_draws: rb,
        angles,
        retained,
        seconds: start.elapsed().as_secs_f64(),
        chain,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_rows(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// summary.csv and density_<param>.csv from traces and conditional draws.
fn write_summaries(
    dir: &Path,
    trace: &TraceStore,
    burn_in: u64,
    rb: &[(String, Vec<TruncNormMixtureParams>)],
    density_points: usize,
) -> Result<()> {
    let mut rows = Vec::new();
    for name in trace.names() {
        let draws = trace.after(name, burn_in).unwrap_or(&[]);
        if draws.is_empty() {
            continue;
        }
        let s = summarize(draws);
        rows.push(format!("{name},{},{},{},{},{},{}", s.mean, s.sd, s.q05, s.q50, s.q95, s.ess));
    }
    write_rows(&dir.join("summary.csv"), "entry,mean,sd,q05,q50,q95,ess", rows)?;
    for (name, draws) in rb {
        if draws.is_empty() {
            continue;
        }
        let post = trace.after(name, burn_in).unwrap_or(&[]);
        let s = summarize(post);
        let grid = density_grid(s.mean, s.sd, density_points);
        let dens = rao_blackwell_density(draws, &grid);
        write_columns(&dir.join(format!("density_{name}.csv")), &["grid", "density"], &[&grid, &dens])?;
    }
    Ok(())
}

fn write_chain_outputs(dir: &Path, out: &ChainOutput, settings: &ChainSettings, density_points: usize) -> Result<()> {
    let names: Vec<String> = settings.traced.iter().map(|&(j, k)| entry_name(j, k)).collect();
    for (name, draws) in names.iter().zip(&out.rb_draws) {
        write_rows(
            &dir.join(format!("rbparams_{name}.csv")),
            "sweep,a,b,c",
            draws.iter().map(|(s, p)| format!("{s},{},{},{}", p.a, p.b, p.c)),
        )?;
    }
    let rb: Vec<(String, Vec<TruncNormMixtureParams>)> = names
        .iter()
        .cloned()
        .zip(out.rb_draws.iter().map(|d| d.iter().map(|(_, p)| *p).collect()))
        .collect();
    write_summaries(dir, &out.trace, settings.burn_in, &rb, density_points)?;
    if !out.angles.is_empty() {
        write_rows(&dir.join("angles.csv"), "sweep,angle", out.angles.iter().map(|(s, a)| format!("{s},{a}")))?;
    }
    write_matrix(&dir.join("posterior_mean_B.csv"), &out.posterior_mean_b, None)?;
    let s2 = DMatrix::from_column_slice(out.posterior_mean_sigma2.len(), 1, out.posterior_mean_sigma2.as_slice());
    write_matrix(&dir.join("posterior_mean_sigma2.csv"), &s2, None)
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Invalid(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Files written by `simulate`.
pub fn write_truth(dir: &Path, y: &ObservationMatrix, truth: &SyntheticTruth) -> Result<()> {
    ensure_dir(dir)?;
    write_matrix(&dir.join("data.csv"), y.data(), None)?;
    write_matrix(&dir.join("B0.csv"), &truth.b0, None)?;
    write_matrix(&dir.join("omega0.csv"), &truth.omega0, None)?;
    let s = DMatrix::from_column_slice(truth.sigma0.len(), 1, truth.sigma0.as_slice());
    write_matrix(&dir.join("sigma0.csv"), &s, None)?;
    let sup = truth.support.map(|b| if b { 1.0 } else { 0.0 });
    write_matrix(&dir.join("support.csv"), &sup, None)
}

pub fn read_truth(dir: &Path) -> Result<SyntheticTruth> {
    let b0 = read_matrix(&dir.join("B0.csv"))?;
    let omega0 = read_matrix(&dir.join("omega0.csv"))?;
    let sigma0 = read_matrix(&dir.join("sigma0.csv"))?;
    let support = read_matrix(&dir.join("support.csv"))?;
    if omega0.nrows() != b0.ncols() || support.shape() != b0.shape() || sigma0.nrows() != b0.nrows() {
        return Err(Error::Dimension(format!("truth files in {} disagree on G or K", dir.display())));
    }
    Ok(SyntheticTruth {
        sigma0: sigma0.column(0).into_owned(),
        support: support.map(|v| v != 0.0),
        b0,
        omega0,
    })
}

/// First support entry of each true column, else (1,1)..(min(G,5),1). 0-based.
pub fn default_traced(truth: Option<&SyntheticTruth>, g: usize) -> Vec<(usize, usize)> {
    match truth {
        Some(t) => (0..t.support.ncols())
            .filter_map(|k| t.support.column(k).iter().position(|&x| x).map(|j| (j, k)))
            .collect(),
        None => (0..g.min(5)).map(|j| (j, 0)).collect(),
    }
}

fn ladder_rows(path: &LadderPath) -> Vec<Vec<(String, f64)>> {
    path.stages
        .iter()
        .map(|st| {
            let mut rows = Vec::new();
            for k in 0..st.b_hat.ncols() {
                for j in 0..st.b_hat.nrows() {
                    rows.push((format!("B_{}_{}", j + 1, k + 1), st.b_hat[(j, k)]));
                }
            }
            for (j, v) in st.sigma_hat.iter().enumerate() {
                rows.push((format!("sigma2_{}", j + 1), *v));
            }
            for (k, v) in st.theta_hat.iter().enumerate() {
                rows.push((format!("theta_{}", k + 1), *v));
            }
            rows.push(("objective".into(), st.objective));
            rows
        })
        .collect()
}

fn simulate(cfg: &RunConfig) -> Result<Value> {
    let (y, truth) = generate_synthetic(&cfg.simulation)?;
    write_truth(&cfg.output_dir, &y, &truth)?;
    Ok(json!({ "G": y.g(), "n": y.n(), "K0": truth.b0.ncols() }))
}

/// Posterior mode used to start the chains, with its ladder path if any.
fn find_mode(cfg: &RunConfig, y: &ObservationMatrix, prior: &PriorSpec, k: usize) -> Result<(MapEstimate, Option<LadderPath>)> {
    match &cfg.ladder {
        Some(l) => {
            let path = run_ladder(y, l, prior, k, &cfg.em, false)?;
            Ok((path.last().clone(), Some(path)))
        }
        None => Ok((em_map(y, prior, svd_init(y, k, prior)?, &cfg.em)?, None)),
    }
}

fn fit(cfg: &RunConfig, resolved: &mut Option<(PriorSpec, Vec<(usize, usize)>)>) -> Result<Value> {
    let data_path = cfg.data_path.as_ref().expect("validated");
    let (raw, dropped) = read_observations(data_path)?;
    if !dropped.is_empty() {
        log::warn!("dropped {} rows with missing values: {:?}", dropped.len(), dropped);
    }
    let y = match &cfg.covariates_path {
        Some(p) => residualize(&raw, &read_covariates(p)?)?,
        None => raw,
    };
    let prior = cfg.prior.resolve(y.g())?;
    let truth = match &cfg.truth_dir {
        Some(d) => Some(read_truth(d)?),
        None => None,
    };
    if let Some(t) = &truth {
        if t.b0.nrows() != y.g() || t.omega0.ncols() != y.n() {
            return Err(Error::Dimension("truth files do not match the data dimensions".into()));
        }
    }
    let traced: Vec<(usize, usize)> = match &cfg.traced_entries {
        Some(t) => t.iter().map(|&(j, k)| (j - 1, k - 1)).collect(),
        None => default_traced(truth.as_ref(), y.g()),
    };
    *resolved = Some((prior, traced.iter().map(|&(j, k)| (j + 1, k + 1)).collect()));
    ensure_dir(&cfg.output_dir)?;

    let adaptive = cfg.k == FactorCount::Adaptive;
    let k_start = match cfg.k {
        FactorCount::Fixed(k) => k,
        FactorCount::Adaptive => 8.min(y.n().saturating_sub(2)).max(1),
    };
    let mut ladder_info = Value::Null;
    let mode = match cfg.init {
        InitMethod::Map => {
            let (mut est, path) = find_mode(cfg, &y, &prior, k_start)?;
            if let Some(path) = &path {
                for (t, rows) in ladder_rows(path).into_iter().enumerate() {
                    write_rows(
                        &cfg.output_dir.join(format!("ladder_stage_{}.csv", t + 1)),
                        "param,value",
                        rows.into_iter().map(|(k, v)| format!("{k},{v}")),
                    )?;
                }
                ladder_info = json!(path
                    .stages
                    .iter()
                    .zip(&path.lambda0)
                    .zip(&path.relative_changes)
                    .map(|((s, l), c)| json!({"lambda0": l, "k_hat": s.k_hat, "objective": s.objective,
                        "relative_change": if c.is_finite() { json!(c) } else { Value::Null }}))
                    .collect::<Vec<_>>());
            }
            if adaptive {
                // Same activity rule as K̂, at the spike rate the mode was found with.
                let lambda0 = path.as_ref().map_or(prior.lambda0, |p| *p.lambda0.last().unwrap());
                let thr = 10.0 / lambda0;
                let mut keep: Vec<usize> = (0..est.b_hat.ncols()).filter(|&c| est.b_hat.column(c).amax() > thr).collect();
                if keep.is_empty() {
                    keep.push(0);
                }
                est.b_hat = est.b_hat.select_columns(&keep);
                est.theta_hat = keep.iter().map(|&c| est.theta_hat[c]).collect();
            }
            write_matrix(&cfg.output_dir.join("map_B.csv"), &est.b_hat, None)?;
            Some(est)
        }
        InitMethod::Truth => None,
    };

    let settings = ChainSettings {
        sweeps: cfg.sweeps,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        traced,
    };
    let seeds: Vec<u64> = (0..cfg.chains).map(|c| chain_seed(cfg.seed, c)).collect();
    let results: Vec<Result<(f64, usize, f64)>> = seeds
        .par_iter()
        .enumerate()
        .map(|(c, &seed)| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut chain = match (&mode, &truth) {
                (Some(est), _) => Chain::from_estimate(cfg.model, &est.b_hat, &est.sigma_hat, &est.theta_hat, &y, &prior, adaptive, &mut rng)?,
                (None, Some(t)) => Chain::from_truth(cfg.model, t, k_start, adaptive, &mut rng)?,
                (None, None) => unreachable!("validated: truth init needs truth_dir"),
            };
            chain.random_scan = cfg.random_scan;
            let dir = cfg.output_dir.join(format!("chain_{c}"));
            ensure_dir(&dir)?;
            let out = run_chain(chain, &y, &prior, &settings, truth.as_ref().map(|t| &t.omega0), Some(&dir), None, &mut rng)?;
            write_chain_outputs(&dir, &out, &settings, cfg.density_points)?;
            Ok((out.seconds, out.chain.k(), out.chain.latitude.acceptance_rate()))
        })
        .collect();
    let mut chains = Vec::new();
    for (c, r) in results.into_iter().enumerate() {
        let (secs, k, acc) = r?;
        chains.push(json!({
            "chain": c,
            "seed": seeds[c],
            "seconds": secs,
            "seconds_per_sweep": secs / cfg.sweeps as f64,
            "final_K": k,
            "latitude_acceptance": if acc.is_finite() { json!(acc) } else { Value::Null },
        }));
    }
    Ok(json!({
        "G": y.g(),
        "n": y.n(),
        "dropped_rows": dropped,
        "ladder": ladder_info,
        "chains": chains,
    }))
}

fn diagnose(cfg: &RunConfig) -> Result<Value> {
    let input = cfg.input_dir.as_ref().expect("validated");
    let fit_cfg_path = input.join("config_resolved.json");
    let text = fs::read_to_string(&fit_cfg_path).map_err(|e| Error::io(&fit_cfg_path, e))?;
    let fit_cfg = parse_config_str(&text)?;
    let mut chain_dirs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|f| f.to_str()).is_some_and(|f| f.starts_with("chain_")))
        .collect();
    chain_dirs.sort();
    if chain_dirs.is_empty() {
        return Err(Error::Invalid(format!("no chain_* directories in {}", input.display())));
    }
    let mut chains = Vec::new();
    for dir in &chain_dirs {
        let name = dir.file_name().unwrap().to_owned();
        let out = cfg.output_dir.join(&name);
        ensure_dir(&out)?;
        let trace = TraceStore::load_dir(dir)?;
        let mut rb = Vec::new();
        for entry in trace.names().filter(|n| n.starts_with("b_")) {
            let p = dir.join(format!("rbparams_{entry}.csv"));
            if !p.exists() {
                continue;
            }
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let draws = if text.lines().count() <= 1 {
                Vec::new()
            } else {
                let m = read_matrix(&p)?;
                (0..m.nrows())
                    .filter_map(|r| TruncNormMixtureParams::new(m[(r, 1)], m[(r, 2)], m[(r, 3)]).ok())
                    .collect()
            };
            rb.push((entry.to_string(), draws));
        }
        write_summaries(&out, &trace, fit_cfg.burn_in, &rb, fit_cfg.density_points)?;
        chains.push(json!({ "chain": name.to_string_lossy(), "records": trace.len() }));
    }
    Ok(json!({ "input_dir": input.display().to_string(), "burn_in": fit_cfg.burn_in, "chains": chains }))
}

/// Execute one configured command and write the resolved config and manifest.
pub fn run_pipeline(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let start = Instant::now();
    ensure_dir(&cfg.output_dir)?;
    let mut resolved = None;
    let details = match cfg.command {
        Command::Simulate => simulate(cfg)?,
        Command::Fit => fit(cfg, &mut resolved)?,
        Command::Diagnose => diagnose(cfg)?,
    };
    let echo = match &resolved {
        Some((p, t)) => cfg.to_json(Some(p), Some(t)),
        None => cfg.to_json(None, None),
    };
    write_json(&cfg.output_dir.join("config_resolved.json"), &echo)?;
    let manifest = json!({
        "command": cfg.command.as_str(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "model": cfg.model.as_str(),
        "wall_seconds": start.elapsed().as_secs_f64(),
        "details": details,
    });
    write_json(&cfg.output_dir.join("run_manifest.json"), &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormality_defect;
    use crate::model::SyntheticSpec;

    #[test]
    fn chain_seeds_differ_and_repeat() {
        let a: Vec<u64> = (0..4).map(|c| chain_seed(7, c)).collect();
        let b: Vec<u64> = (0..4).map(|c| chain_seed(7, c)).collect();
        assert_eq!(a, b);
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(a[i], a[j]);
            }
        }
        assert_ne!(chain_seed(8, 0), a[0]);
    }

    fn small() -> (ObservationMatrix, SyntheticTruth) {
        generate_synthetic(&SyntheticSpec {
            g: 60,
            n: 20,
            k0: 2,
            block_len: 30,
            stride: 30,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn every_model_runs_from_estimate() {
        let (y, _) = small();
        let prior = PriorSpec::defaults_for(y.g());
        let est = em_map(&y, &prior, svd_init(&y, 3, &prior).unwrap(), &Default::default()).unwrap();
        for model in ModelKind::ALL {
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            let chain = Chain::from_estimate(model, &est.b_hat, &est.sigma_hat, &est.theta_hat, &y, &prior, false, &mut rng).unwrap();
            let settings = ChainSettings {
                sweeps: 20,
                burn_in: 5,
                thin: 1,
                traced: vec![(0, 0), (40, 1)],
            };
            let out = run_chain(chain, &y, &prior, &settings, None, None, None, &mut rng).unwrap();
            assert_eq!(out.retained, 15);
            assert_eq!(out.trace.len(), 20);
            if model.factor_mode() == FactorMode::Orthonormal {
                assert!(orthonormality_defect(out.chain.omega()) < 1e-8);
            }
            assert!(out.posterior_mean_sigma2.iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn truth_start_pads_and_keeps_manifold() {
        let (y, truth) = small();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let chain = Chain::from_truth(ModelKind::SpslOrthonormal, &truth, 4, false, &mut rng).unwrap();
        assert_eq!(chain.k(), 4);
        assert!(orthonormality_defect(chain.omega()) < 1e-8);
        assert_eq!(chain.loading(0, 3), 0.0);
        let prior = PriorSpec::defaults_for(y.g());
        let settings = ChainSettings {
            sweeps: 4,
            burn_in: 1,
            thin: 2,
            traced: default_traced(Some(&truth), y.g()),
        };
        assert_eq!(settings.traced, vec![(0, 0), (30, 1)]);
        let out = run_chain(chain, &y, &prior, &settings, Some(&truth.omega0), None, None, &mut rng).unwrap();
        assert_eq!(out.trace.sweeps(), &[2, 4]);
        assert_eq!(out.angles.len(), 2);
    }

    #[test]
    fn adaptive_chain_changes_k() {
        let (y, _) = small();
        let prior = PriorSpec::defaults_for(y.g());
        let est = em_map(&y, &prior, svd_init(&y, 2, &prior).unwrap(), &Default::default()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let chain = Chain::from_estimate(ModelKind::SpslNormal, &est.b_hat, &est.sigma_hat, &est.theta_hat, &y, &prior, true, &mut rng).unwrap();
        let settings = ChainSettings {
            sweeps: 30,
            burn_in: 10,
            thin: 1,
            traced: vec![(0, 0)],
        };
        let out = run_chain(chain, &y, &prior, &settings, None, None, None, &mut rng).unwrap();
        let ks = out.trace.series("K").unwrap();
        assert!(ks.iter().all(|&k| k >= 1.0));
        assert!(ks.iter().any(|&k| k != ks[0]));
    }
}
