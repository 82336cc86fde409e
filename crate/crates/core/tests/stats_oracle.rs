//! Independent checks of the statistical constants: the embedded Nemenyi q
//! table against a quadrature of the studentized range distribution, and the
//! chi-square helpers against `statrs`.

use lhcf::stats::q_table::{K_MAX, K_MIN, Q_005, Q_010};
use lhcf::stats::{chi_square_cdf, chi_square_critical, nemenyi_q, regularized_gamma_p};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

/// P(range of k iid standard normals <= w), infinite degrees of freedom:
/// k ∫ φ(z) [Φ(z) − Φ(z − w)]^(k−1) dz, by composite Simpson on [−9, 9].
fn range_cdf(k: usize, w: f64) -> f64 {
    let n = Normal::standard();
    let steps = 4000;
    let (a, b) = (-9.0, 9.0);
    let h = (b - a) / steps as f64;
    let f = |z: f64| n.pdf(z) * (n.cdf(z) - n.cdf(z - w)).powi(k as i32 - 1);
    let mut s = f(a) + f(b);
    for i in 1..steps {
        let z = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    k as f64 * s * h / 3.0
}

/// Nemenyi constant: upper-alpha studentized range quantile divided by √2.
fn q_oracle(k: usize, alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if range_cdf(k, mid) < 1.0 - alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) / std::f64::consts::SQRT_2
}

#[test]
fn q_table_matches_studentized_range_quadrature() {
    for k in K_MIN..=K_MAX {
        for (alpha, table) in [(0.05, &Q_005), (0.10, &Q_010)] {
            let want = q_oracle(k, alpha);
            let got = table[k - K_MIN];
            assert!(
                (got - want).abs() < 1.5e-3,
                "k = {k}, alpha = {alpha}: table {got}, quadrature {want:.5}"
            );
            assert_eq!(nemenyi_q(k, alpha).unwrap(), got);
        }
    }
}

#[test]
fn chi_square_agrees_with_statrs() {
    for df in 1..=40 {
        let dist = ChiSquared::new(df as f64).unwrap();
        for alpha in [0.10, 0.05, 0.01, 0.001] {
            let want = dist.inverse_cdf(1.0 - alpha);
            let got = chi_square_critical(alpha, df as f64).unwrap();
            assert!((got - want).abs() < 1e-8 * want.max(1.0), "df {df} alpha {alpha}: {got} vs {want}");
        }
        for x in [0.01, 0.5, 1.0, 3.0, df as f64, 2.0 * df as f64 + 7.0] {
            let want = dist.cdf(x);
            assert!((chi_square_cdf(x, df as f64) - want).abs() < 1e-12, "df {df} x {x}");
        }
    }
}

#[test]
fn regularized_gamma_agrees_with_statrs() {
    for a in [0.5, 1.0, 2.5, 7.0, 20.0, 55.5] {
        for x in [1e-3, 0.3, 1.0, 4.0, 12.0, 60.0] {
            let want = statrs::function::gamma::gamma_lr(a, x);
            let got = regularized_gamma_p(a, x);
            assert!((got - want).abs() < 1e-12, "P({a}, {x}) = {got}, statrs {want}");
        }
    }
}
