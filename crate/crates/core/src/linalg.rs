//! Small dense helpers on top of nalgebra for row-orthonormal factor matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::std_normal;
use crate::error::{Error, Result};

/// Remove from `v` its components along the given rows, each assumed to have
/// squared norm `row_norm_sq` and to be mutually orthogonal. Two passes.
pub fn project_out_rows(v: &mut DVector<f64>, rows: &DMatrix<f64>, skip: Option<usize>, row_norm_sq: f64) {
    for _ in 0..2 {
        for t in 0..rows.nrows() {
            if Some(t) == skip {
                continue;
            }
            let row = rows.row(t);
            let coef = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / row_norm_sq;
            for (vi, ri) in v.iter_mut().zip(row.iter()) {
                *vi -= coef * ri;
            }
        }
    }
}

/// Remove the component of `v` along unit vector `u`.
pub fn project_out_unit(v: &mut DVector<f64>, u: &DVector<f64>) {
    let c = v.dot(u);
    v.axpy(-c, u, 1.0);
}

/// Orthonormalize the rows of `m` in place by modified Gram–Schmidt (two
/// passes), then scale each row to norm `radius`.
pub fn orthonormalize_rows(m: &mut DMatrix<f64>, radius: f64) -> Result<()> {
    let (k, n) = m.shape();
    if k > n {
        return Err(Error::Dimension(format!("cannot orthonormalize {k} rows in dimension {n}")));
    }
    for i in 0..k {
        let orig = m.row(i).norm();
        for _ in 0..2 {
            for t in 0..i {
                let c = m.row(i).dot(&m.row(t));
                let rt = m.row(t).clone_owned();
                let mut ri = m.row_mut(i);
                ri -= rt * c;
            }
        }
        let nrm = m.row(i).norm();
        if !(nrm > 1e-10 * orig.max(f64::MIN_POSITIVE)) || nrm == 0.0 {
            return Err(Error::Numerical(format!("row {i} is numerically dependent on earlier rows")));
        }
        m.row_mut(i).scale_mut(1.0 / nrm);
    }
    m.scale_mut(radius);
    Ok(())
}

/// K×n matrix whose rows, divided by `sqrt(n)`, are a Haar-uniform point of St(K, n).
pub fn uniform_stiefel_scaled<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> DMatrix<f64> {
    loop {
        let mut m = DMatrix::from_fn(k, n, |_, _| std_normal(rng));
        if orthonormalize_rows(&mut m, (n as f64).sqrt()).is_ok() {
            return m;
        }
    }
}

/// max |Ω Ωᵀ − n I|.
pub fn orthonormality_defect(omega: &DMatrix<f64>) -> f64 {
    let n = omega.ncols() as f64;
    let g = omega * omega.transpose();
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { n } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn stiefel_draw_is_scaled_orthonormal() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let m = uniform_stiefel_scaled(5, 40, &mut rng);
        assert!(orthonormality_defect(&m) < 1e-12);
    }

    #[test]
    fn dependent_rows_are_rejected() {
        let mut m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(orthonormalize_rows(&mut m, 1.0).is_err());
    }
}
