use lhcf::numerics::{cholesky, log_sum_exp, mvn_log_density, Matrix, Rng};
use proptest::prelude::*;

fn lower_triangular(d: usize, entries: &[f64], diag: &[f64]) -> Matrix {
    let mut l = Matrix::zeros(d, d);
    let mut it = entries.iter();
    for (i, &di) in diag.iter().enumerate().take(d) {
        for j in 0..i {
            l.row_mut(i)[j] = *it.next().unwrap();
        }
        l.row_mut(i)[i] = di;
    }
    l
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs_factor(
        d in 1usize..=16,
        entries in prop::collection::vec(-2.0f64..2.0, 120),
        diag in prop::collection::vec(0.2f64..3.0, 16),
    ) {
        let l = lower_triangular(d, &entries, &diag);
        let a = l.matmul(&l.transpose()).unwrap();
        let got = cholesky(&a).unwrap();
        prop_assert!(got.max_abs_diff(&l) < 1e-8);
    }

    #[test]
    fn log_sum_exp_shift_invariance(
        v in prop::collection::vec(-50.0f64..50.0, 1..40),
        c in -500.0f64..500.0,
    ) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let a = log_sum_exp(&shifted).unwrap();
        let b = log_sum_exp(&v).unwrap() + c;
        prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn equal_seeds_equal_streams(seed in any::<u64>(), path in prop::collection::vec(any::<u64>(), 0..4)) {
        let mut a = Rng::derive(seed, &path);
        let mut b = Rng::derive(seed, &path);
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }
}

/// Monte Carlo estimate of ∫ exp(log density) over a box holding nearly all
/// of the mass: volume times the mean density at uniform points.
#[test]
fn mvn_density_integrates_to_one() {
    let mut rng = Rng::new(2024);
    for d in 1..=3 {
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 + 0.5 * i as f64 } else { 0.3 }).collect())
            .collect();
        let sigma = Matrix::from_rows(&rows).unwrap();
        let mu: Vec<f64> = (0..d).map(|i| i as f64 - 1.0).collect();
        let half: f64 = 7.0;
        let volume = (2.0 * half).powi(d);
        let samples = 100_000;
        let mut total = 0.0;
        for _ in 0..samples {
            let z: Vec<f64> = mu.iter().map(|m| m + half * (2.0 * rng.uniform() - 1.0)).collect();
            total += mvn_log_density(&z, &mu, &sigma).unwrap().exp();
        }
        let integral = volume * total / samples as f64;
        assert!((integral - 1.0).abs() < 0.02, "d = {d}: integral {integral}");
    }
}
