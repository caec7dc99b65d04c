#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use orthofactor::config::ModelKind;
use orthofactor::diagnostics::align_to_reference;
use orthofactor::dist::{inverse_gamma, laplace, std_normal, uniform_open};
use orthofactor::linalg::uniform_stiefel_scaled;
use orthofactor::map::{run_ladder, EmOptions, LadderPath, LadderSchedule, MapEstimate};
use orthofactor::model::{
    generate_synthetic, ChainState, FactorMode, ObservationMatrix, PriorSpec, SyntheticSpec, SyntheticTruth,
};
use orthofactor::pipeline::{run_chain, Chain, ChainKind, ChainOutput, ChainSettings};
use orthofactor::sampler::ghosh_dunson::GDState;
use orthofactor::sampler::orthonormal::LatitudeSampler;

/// Kolmogorov–Smirnov distance between samples and the distribution whose
/// log density is evaluated on `points` equally spaced nodes of [lo, hi].
pub fn ks_against_grid(samples: &[f64], log_density: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> f64 {
    let h = (hi - lo) / (points - 1) as f64;
    let xs: Vec<f64> = (0..points).map(|i| lo + h * i as f64).collect();
    let lv: Vec<f64> = xs.iter().map(|&x| log_density(x)).collect();
    let top = lv.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let dens: Vec<f64> = lv.iter().map(|&v| if v.is_finite() { (v - top).exp() } else { 0.0 }).collect();
    let mut cdf = vec![0.0; points];
    for i in 1..points {
        cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i] + dens[i - 1]);
    }
    let total = cdf[points - 1];
    let f = |x: f64| -> f64 {
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let t = (x - lo) / h;
        let i = (t.floor() as usize).min(points - 2);
        let w = t - i as f64;
        // Exact integral of the linear interpolant over the partial cell.
        let partial = h * (w * dens[i] + 0.5 * w * w * (dens[i + 1] - dens[i]));
        (cdf[i] + partial) / total
    };
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let fx = f(x);
        d = d.max(fx - i as f64 / n).max((i + 1) as f64 / n - fx);
    }
    d
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Squared standard error of the mean of a correlated series by batch means.
pub fn batch_means_var(xs: &[f64], batches: usize) -> f64 {
    let len = xs.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * len..(b + 1) * len])).collect();
    variance(&means) / batches as f64
}

/// Geweke z-scores for (mean β, mean log σ²) comparing the forward
/// simulator with the successive-conditional simulator.
pub fn geweke(model: ModelKind, prior: &PriorSpec, g: usize, n: usize, k: usize, rounds: usize, seed: u64) -> [f64; 2] {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut forward = [Vec::with_capacity(rounds), Vec::with_capacity(rounds)];
    for _ in 0..rounds {
        let (chain, _) = prior_draw(model, prior, g, n, k, &mut rng);
        let s = statistics(&chain);
        forward[0].push(s[0]);
        forward[1].push(s[1]);
    }
    let (mut chain, mut y) = prior_draw(model, prior, g, n, k, &mut rng);
    let mut successive = [Vec::with_capacity(rounds), Vec::with_capacity(rounds)];
    for _ in 0..rounds {
        chain.step(&y, prior, &mut rng).expect("sweep");
        y = observe(&chain, &mut rng);
        let s = statistics(&chain);
        successive[0].push(s[0]);
        successive[1].push(s[1]);
    }
    let mut z = [0.0; 2];
    for t in 0..2 {
        let se2 = variance(&forward[t]) / rounds as f64 + batch_means_var(&successive[t], 50);
        z[t] = (mean(&forward[t]) - mean(&successive[t])) / se2.sqrt();
    }
    z
}

fn statistics(chain: &Chain) -> [f64; 2] {
    let b = chain.loadings();
    let s = chain.sigma2();
    [b.mean(), s.iter().map(|v| v.ln()).sum::<f64>() / s.len() as f64]
}

/// Y ~ N(BΩ, Σ) given the chain's state.
pub fn observe<R: Rng + ?Sized>(chain: &Chain, rng: &mut R) -> ObservationMatrix {
    let b = chain.loadings();
    let s = chain.sigma2();
    let mut y = &b * chain.omega();
    for j in 0..y.nrows() {
        for i in 0..y.ncols() {
            y[(j, i)] += s[j].sqrt() * std_normal(rng);
        }
    }
    ObservationMatrix::new(y).expect("finite data")
}

/// Parameters from the prior, then data from the likelihood.
pub fn prior_draw<R: Rng + ?Sized>(
    model: ModelKind,
    prior: &PriorSpec,
    g: usize,
    n: usize,
    k: usize,
    rng: &mut R,
) -> (Chain, ObservationMatrix) {
    let mode = model.factor_mode();
    // Stick-breaking: log θ_k = Σ_{l≤k} log ν_l, ν ~ Beta(α, 1).
    let mut log_theta = Vec::with_capacity(k);
    let mut acc = 0.0;
    for _ in 0..k {
        acc += uniform_open(rng).ln() / prior.alpha;
        log_theta.push(acc);
    }
    let gamma = DMatrix::from_fn(g, k, |_, c| uniform_open(rng) < log_theta[c].exp());
    let sigma2 = DVector::from_fn(g, |_, _| inverse_gamma(prior.eta / 2.0, prior.eta * prior.epsilon / 2.0, rng));
    let omega = match mode {
        FactorMode::Normal => DMatrix::from_fn(k, n, |_, _| std_normal(rng)),
        FactorMode::Orthonormal => uniform_stiefel_scaled(k, n, rng),
    };
    let state = if model.is_gd() {
        let q = DMatrix::from_fn(g, k, |j, c| std_normal(rng) / prior.gd_precision(gamma[(j, c)]).sqrt());
        let r = DVector::from_fn(k, |_, _| std_normal(rng) / prior.gd_lambda.sqrt());
        ChainKind::Gd(GDState {
            q,
            r,
            gamma,
            log_theta,
            sigma2,
            omega,
            sweep: 0,
            mode,
        })
    } else {
        let b = DMatrix::from_fn(g, k, |j, c| laplace(prior.rate(gamma[(j, c)]), rng));
        ChainKind::Spsl(ChainState {
            b,
            omega,
            gamma,
            log_theta,
            sigma2,
            sweep: 0,
            mode,
        })
    };
    let chain = Chain {
        model,
        state,
        latitude: LatitudeSampler::new(false),
        adaptive_k: false,
        random_scan: false,
    };
    let y = observe(&chain, rng);
    (chain, y)
}

/// Truth padded with zero columns to K.
pub fn padded(b0: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(b0.nrows(), k);
    let keep = k.min(b0.ncols());
    out.columns_mut(0, keep).copy_from(&b0.columns(0, keep));
    out
}

/// Column of `est` matched to each true column (and its sign).
pub fn match_columns(est: &DMatrix<f64>, b0: &DMatrix<f64>) -> Vec<(usize, f64)> {
    let al = align_to_reference(est, &padded(b0, est.ncols())).expect("alignment");
    (0..b0.ncols())
        .map(|t| {
            let s = al.permutation.iter().position(|&r| r == t).expect("every column matched");
            (s, al.signs[s])
        })
        .collect()
}

/// Aligned copy of `est` restricted to the true columns.
pub fn aligned_to_truth(est: &DMatrix<f64>, b0: &DMatrix<f64>) -> DMatrix<f64> {
    let al = align_to_reference(est, &padded(b0, est.ncols())).expect("alignment");
    al.aligned.columns(0, b0.ncols()).into_owned()
}

pub fn synthetic(spec: &SyntheticSpec) -> (ObservationMatrix, SyntheticTruth) {
    generate_synthetic(spec).expect("synthetic data")
}

/// The default ladder, every stage kept.
pub fn default_ladder(y: &ObservationMatrix, k: usize) -> LadderPath {
    let prior = PriorSpec::defaults_for(y.g());
    let options = EmOptions {
        parameter_expansion: true,
        ..EmOptions::default()
    };
    run_ladder(y, &LadderSchedule::default(), &prior, k, &options, true).expect("ladder")
}

pub fn chain_from_estimate(model: ModelKind, est: &MapEstimate, y: &ObservationMatrix, prior: &PriorSpec, seed: u64) -> (Chain, ChaCha20Rng) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let chain = Chain::from_estimate(model, &est.b_hat, &est.sigma_hat, &est.theta_hat, y, prior, false, &mut rng).expect("chain init");
    (chain, rng)
}

pub fn run(
    chain: Chain,
    mut rng: ChaCha20Rng,
    y: &ObservationMatrix,
    prior: &PriorSpec,
    sweeps: u64,
    burn_in: u64,
    traced: Vec<(usize, usize)>,
    observer: Option<&mut dyn FnMut(u64, &Chain)>,
) -> ChainOutput {
    let settings = ChainSettings {
        sweeps,
        burn_in,
        thin: 1,
        traced,
    };
    run_chain(chain, y, prior, &settings, None, None, observer, &mut rng).expect("chain run")
}
