//! Chain diagnostics: LQ factors, subspace angles, effective sample size,
//! Rao-Blackwellized densities and signed-permutation alignment.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::sampler::normal::TruncNormMixtureParams;

/// Ω = K·V with K lower-triangular (positive diagonal) and V row-orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct LQFactors {
    pub k_mat: DMatrix<f64>,
    pub v_mat: DMatrix<f64>,
}

/// LQ decomposition through the thin QR of Mᵀ, with signs fixed so that the
/// diagonal of K is positive.
pub fn lq_decompose(m: &DMatrix<f64>) -> Result<LQFactors> {
    let (k, n) = m.shape();
    if k == 0 || k > n {
        return Err(Error::Dimension(format!("LQ needs 1 <= K <= n, got {k}x{n}")));
    }
    let qr = m.transpose().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..k {
        let d = r[(i, i)];
        if d.abs() <= 1e-12 * scale * (n as f64).sqrt() {
            return Err(Error::Numerical(format!("LQ: row {i} is linearly dependent on earlier rows")));
        }
        if d < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    Ok(LQFactors {
        k_mat: r.transpose(),
        v_mat: q.transpose(),
    })
}

/// ‖V_ref^⊥ V_testᵀ‖_F = sqrt(K_test − ‖V_ref V_testᵀ‖_F²) for row-orthonormal
/// inputs. The row counts may differ; the value then measures how much of
/// the test subspace lies outside the reference subspace.
pub fn column_space_angle(v_ref: &DMatrix<f64>, v_test: &DMatrix<f64>) -> Result<f64> {
    if v_ref.ncols() != v_test.ncols() {
        return Err(Error::Dimension(format!(
            "angle inputs have {} and {} columns",
            v_ref.ncols(),
            v_test.ncols()
        )));
    }
    let k = v_test.nrows() as f64;
    let overlap = (v_ref * v_test.transpose()).norm_squared();
    Ok((k - overlap).max(0.0).sqrt())
}

/// Why an ESS value is not a plain estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EssFlag {
    /// The trace has zero variance; ESS is reported as M.
    ConstantTrace,
    /// The estimate exceeded M (negative autocorrelation) and was clipped.
    Clipped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssEstimate {
    pub ess: f64,
    pub flag: Option<EssFlag>,
}

/// Sample autocorrelations ρ̂_0..ρ̂_{M−1} (biased autocovariance, FFT).
pub fn autocorrelation(trace: &[f64]) -> Vec<f64> {
    let m = trace.len();
    if m == 0 {
        return Vec::new();
    }
    let mean = trace.iter().sum::<f64>() / m as f64;
    let len = (2 * m).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = trace.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    buf.resize(len, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for z in buf.iter_mut() {
        *z = Complex::new(z.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let c0 = buf[0].re;
    if c0 <= 0.0 {
        return vec![0.0; m];
    }
    buf[..m].iter().map(|z| z.re / c0).collect()
}

/// ESS = M / (1 + 2 Σ ρ̂_t) with Geyer's initial positive sequence truncation,
/// clipped to [1, M].
pub fn effective_sample_size(trace: &[f64]) -> Result<EssEstimate> {
    let m = trace.len();
    if m < 10 {
        return Err(Error::Invalid(format!("ESS needs at least 10 draws, got {m}")));
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("ESS trace contains non-finite values".into()));
    }
    let first = trace[0];
    if trace.iter().all(|&v| v == first) {
        return Ok(EssEstimate {
            ess: m as f64,
            flag: Some(EssFlag::ConstantTrace),
        });
    }
    let rho = autocorrelation(trace);
    // τ = −1 + 2 Σ_{j} (ρ_{2j} + ρ_{2j+1}) over the initial positive pairs.
    let mut tau = -1.0;
    let mut j = 0;
    while 2 * j + 1 < m {
        let pair = rho[2 * j] + rho[2 * j + 1];
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        j += 1;
    }
    let raw = if tau > 0.0 { m as f64 / tau } else { f64::INFINITY };
    if raw > m as f64 {
        return Ok(EssEstimate {
            ess: m as f64,
            flag: Some(EssFlag::Clipped),
        });
    }
    Ok(EssEstimate { ess: raw.max(1.0), flag: None })
}

/// Pointwise average of normalized conditional densities over draws.
pub fn rao_blackwell_density(draws: &[TruncNormMixtureParams], grid: &[f64]) -> Vec<f64> {
    if draws.is_empty() {
        return vec![0.0; grid.len()];
    }
    let mut out = vec![0.0; grid.len()];
    for p in draws {
        let log_z = p.log_normalizer();
        for (o, &x) in out.iter_mut().zip(grid) {
            *o += (-p.a * x * x + p.b * x - p.c * x.abs() - log_z).exp();
        }
    }
    let w = 1.0 / draws.len() as f64;
    out.iter_mut().for_each(|v| *v *= w);
    out
}

/// `points` equally spaced values over mean ± 6 sd.
pub fn density_grid(mean: f64, sd: f64, points: usize) -> Vec<f64> {
    let half = 6.0 * if sd > 0.0 { sd } else { 1e-6_f64.max(mean.abs() * 1e-6) };
    let lo = mean - half;
    let step = 2.0 * half / (points.max(2) - 1) as f64;
    (0..points).map(|i| lo + step * i as f64).collect()
}

/// Result of matching sample columns to reference columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Reference column matched to each sample column.
    pub permutation: Vec<usize>,
    /// Sign applied to each sample column.
    pub signs: Vec<f64>,
    /// Sample columns moved to their reference positions and sign-corrected.
    pub aligned: DMatrix<f64>,
}

/// Greedy signed-permutation matching by absolute cosine similarity.
pub fn align_to_reference(sample: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Alignment> {
    if sample.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "alignment inputs differ in shape: {:?} vs {:?}",
            sample.shape(),
            reference.shape()
        )));
    }
    let k = sample.ncols();
    if k > 64 {
        return Err(Error::Invalid(format!("alignment supports K <= 64, got {k}")));
    }
    let s_norm: Vec<f64> = sample.column_iter().map(|c| c.norm()).collect();
    let r_norm: Vec<f64> = reference.column_iter().map(|c| c.norm()).collect();
    let mut pairs = Vec::with_capacity(k * k);
    for s in 0..k {
        for r in 0..k {
            let dot = sample.column(s).dot(&reference.column(r));
            let denom = s_norm[s] * r_norm[r];
            // Zero-norm columns sort after every real match.
            let score = if denom > 0.0 { (dot / denom).abs() } else { -1.0 };
            pairs.push((score, s, r, dot));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut permutation = vec![usize::MAX; k];
    let mut signs = vec![1.0; k];
    let mut taken = vec![false; k];
    for (score, s, r, dot) in pairs {
        if permutation[s] != usize::MAX || taken[r] {
            continue;
        }
        permutation[s] = r;
        taken[r] = true;
        signs[s] = if score >= 0.0 && dot < 0.0 { -1.0 } else { 1.0 };
    }
    let mut aligned = DMatrix::zeros(sample.nrows(), k);
    for s in 0..k {
        aligned.set_column(permutation[s], &(sample.column(s) * signs[s]));
    }
    Ok(Alignment {
        permutation,
        signs,
        aligned,
    })
}

/// Posterior summary of one scalar trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSummary {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub ess: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(trace: &[f64]) -> TraceSummary {
    let m = trace.len();
    let mean = trace.iter().sum::<f64>() / m.max(1) as f64;
    let var = if m > 1 {
        trace.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let mut sorted = trace.to_vec();
    sorted.sort_by(f64::total_cmp);
    TraceSummary {
        mean,
        sd: var.sqrt(),
        q05: quantile_sorted(&sorted, 0.05),
        q50: quantile_sorted(&sorted, 0.5),
        q95: quantile_sorted(&sorted, 0.95),
        ess: effective_sample_size(trace).map(|e| e.ess).unwrap_or(f64::NAN),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::std_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn lq_examples() {
        let n = 6;
        let mut m = DMatrix::zeros(2, n);
        m[(0, 0)] = (n as f64).sqrt();
        m[(1, 1)] = (n as f64).sqrt();
        let f = lq_decompose(&m).unwrap();
        assert!((f.k_mat.clone() - DMatrix::identity(2, 2) * (n as f64).sqrt()).amax() < 1e-12);
        assert!((f.v_mat[(0, 0)] - 1.0).abs() < 1e-12 && (f.v_mat[(1, 1)] - 1.0).abs() < 1e-12);

        let row = DMatrix::from_row_slice(1, 3, &[3.0, -4.0, 0.0]);
        let f = lq_decompose(&row).unwrap();
        assert!((f.k_mat[(0, 0)] - 5.0).abs() < 1e-12);
        assert!((f.v_mat.clone() - row / 5.0).amax() < 1e-12);

        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let m = DMatrix::from_fn(3, 10, |_, _| std_normal(&mut rng));
        let f = lq_decompose(&m).unwrap();
        assert!((&f.k_mat * &f.v_mat - &m).norm() / m.norm() < 1e-10);
        assert!((&f.v_mat * f.v_mat.transpose() - DMatrix::identity(3, 3)).amax() < 1e-10);
        assert!(f.k_mat[(0, 1)] == 0.0 && f.k_mat[(0, 2)] == 0.0 && f.k_mat[(1, 2)] == 0.0);
        assert!((0..3).all(|i| f.k_mat[(i, i)] > 0.0));

        let dep = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(lq_decompose(&dep).is_err());
    }

    #[test]
    fn angle_examples() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = DMatrix::from_row_slice(1, 2, &[h, h]);
        assert_eq!(column_space_angle(&a, &a).unwrap(), 0.0);
        assert!((column_space_angle(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        // sin 45° by explicit construction: complement of (1,0) is (0,1).
        assert!((column_space_angle(&a, &c).unwrap() - h).abs() < 1e-12);
        assert!(column_space_angle(&a, &DMatrix::zeros(1, 3)).is_err());
        // A plane containing the test line leaves nothing outside.
        let plane = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let line = DMatrix::from_row_slice(1, 3, &[h, h, 0.0]);
        assert!(column_space_angle(&plane, &line).unwrap() < 1e-12);
    }

    #[test]
    fn ess_iid_and_ar1() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let iid: Vec<f64> = (0..10_000).map(|_| std_normal(&mut rng)).collect();
        let e = effective_sample_size(&iid).unwrap();
        assert!(e.ess >= 9000.0 && e.ess <= 10_000.0, "{e:?}");

        let rho = 0.5;
        let mut x = 0.0;
        let ar: Vec<f64> = (0..100_000)
            .map(|_| {
                x = rho * x + (1.0 - rho * rho as f64).sqrt() * std_normal(&mut rng);
                x
            })
            .collect();
        let e = effective_sample_size(&ar).unwrap();
        let target = 100_000.0 * (1.0 - rho) / (1.0 + rho);
        assert!((e.ess / target - 1.0).abs() < 0.1, "{} vs {target}", e.ess);
    }

    #[test]
    fn ess_edge_cases() {
        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let e = effective_sample_size(&alt).unwrap();
        assert_eq!(e.ess, 100.0);
        assert_eq!(e.flag, Some(EssFlag::Clipped));
        let e = effective_sample_size(&[2.0; 50]).unwrap();
        assert_eq!(e.flag, Some(EssFlag::ConstantTrace));
        assert_eq!(e.ess, 50.0);
        assert!(effective_sample_size(&[1.0; 5]).is_err());
    }

    fn trapezoid(grid: &[f64], f: &[f64]) -> f64 {
        grid.windows(2).zip(f.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
    }

    #[test]
    fn rb_density_examples() {
        let grid: Vec<f64> = (0..=2000).map(|i| -10.0 + 0.01 * i as f64).collect();
        let p = TruncNormMixtureParams::new(1.0, 0.0, 0.0).unwrap();
        let d = rao_blackwell_density(&[p], &grid);
        for (x, v) in grid.iter().zip(&d) {
            let want = (-x * x).exp() / std::f64::consts::PI.sqrt();
            assert!((v - want).abs() < 1e-12);
        }
        let draws = [
            TruncNormMixtureParams::new(1.0, 4.0, 0.5).unwrap(),
            TruncNormMixtureParams::new(1.0, -4.0, 0.5).unwrap(),
        ];
        let d = rao_blackwell_density(&draws, &grid);
        for i in 0..grid.len() {
            assert!((d[i] - d[grid.len() - 1 - i]).abs() < 1e-12);
        }
        // Modes at ±1.75, dip at 0.
        assert!(d[1000] < d[1175] && d[1000] < d[825]);
        let area = trapezoid(&grid, &d);
        assert!((0.999..=1.001).contains(&area), "{area}");
    }

    #[test]
    fn alignment_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let r = DMatrix::from_fn(20, 4, |_, _| std_normal(&mut rng));
        let mut s = r.clone();
        s.swap_columns(0, 1);
        s.column_mut(0).neg_mut();
        let a = align_to_reference(&s, &r).unwrap();
        assert_eq!(a.permutation, vec![1, 0, 2, 3]);
        assert_eq!(a.signs, vec![-1.0, 1.0, 1.0, 1.0]);
        assert!((a.aligned - &r).amax() < 1e-15);
        let a = align_to_reference(&r, &r).unwrap();
        assert_eq!(a.permutation, vec![0, 1, 2, 3]);
        assert!(a.signs.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn alignment_zero_column_goes_last() {
        let r = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let s = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.0, -2.0, 0.0, 0.0]);
        let a = align_to_reference(&s, &r).unwrap();
        assert_eq!(a.permutation, vec![0, 1]);
        assert_eq!(a.signs, vec![1.0, -1.0]);
    }

    #[test]
    fn summary_quantiles() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let s = summarize(&v);
        assert_eq!(s.mean, 50.0);
        assert_eq!(s.q05, 5.0);
        assert_eq!(s.q50, 50.0);
        assert_eq!(s.q95, 95.0);
    }
}
