mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use orthofactor::config::ModelKind;
use orthofactor::linalg::orthonormality_defect;
use orthofactor::model::{PriorSpec, SyntheticSpec};
use orthofactor::pipeline::Chain;

use common::synthetic;

fn running_medians(xs: &[f64]) -> Vec<f64> {
    (1..=xs.len())
        .map(|t| {
            let mut head = xs[..t].to_vec();
            head.sort_by(f64::total_cmp);
            if t % 2 == 1 {
                head[t / 2]
            } else {
                0.5 * (head[t / 2 - 1] + head[t / 2])
            }
        })
        .collect()
}

#[test]
fn normal_factor_loadings_inflate_from_the_truth() {
    let (y, truth) = synthetic(&SyntheticSpec::default());
    let prior = PriorSpec {
        lambda0: 20.0,
        lambda1: 0.001,
        ..PriorSpec::defaults_for(y.g())
    };
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let mut chain = Chain::from_truth(ModelKind::SpslNormal, &truth, truth.b0.ncols(), false, &mut rng).unwrap();
    let mut trace = Vec::with_capacity(50);
    for _ in 0..50 {
        chain.step(&y, &prior, &mut rng).unwrap();
        trace.push(chain.loading(0, 0).abs());
    }
    let med = running_medians(&trace);
    // Kendall's tau between the running median and the sweep index.
    let mut concordant = 0i64;
    let mut pairs = 0i64;
    for a in 0..med.len() {
        for b in a + 1..med.len() {
            concordant += match med[b].partial_cmp(&med[a]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
            pairs += 1;
        }
    }
    let tau = concordant as f64 / pairs as f64;
    assert!(tau > 0.5, "running median trend tau {tau}: {med:?}");
    assert!(med[49] > med[9] && med[9] > 1.0, "no inflation: {med:?}");
}

#[test]
fn orthonormal_chains_on_small_data_stay_on_the_manifold() {
    let (y, truth) = synthetic(&SyntheticSpec::scaled_down(4));
    let prior = PriorSpec::defaults_for(y.g());
    let n = y.n() as f64;
    for (i, model) in [ModelKind::SpslOrthonormal, ModelKind::GdOrthonormal].into_iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(i as u64);
        let mut chain = Chain::from_truth(model, &truth, 6, false, &mut rng).unwrap();
        for _ in 0..100 {
            chain.step(&y, &prior, &mut rng).unwrap();
            assert!(orthonormality_defect(chain.omega()) / n <= 1e-8);
        }
    }
}

#[test]
fn adaptive_chains_keep_a_valid_factor_count() {
    let (y, truth) = synthetic(&SyntheticSpec::scaled_down(4));
    let prior = PriorSpec::defaults_for(y.g());
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut chain = Chain::from_truth(ModelKind::SpslOrthonormal, &truth, 8, true, &mut rng).unwrap();
    for _ in 0..200 {
        chain.step(&y, &prior, &mut rng).unwrap();
        let k = chain.k();
        assert!(k >= 1 && k + 1 <= y.n());
        assert_eq!(chain.omega().nrows(), k);
        assert_eq!(chain.loadings().ncols(), k);
        assert!(orthonormality_defect(chain.omega()) / y.n() as f64 <= 1e-8);
    }
}
