use std::collections::BTreeMap;

use lhcf::clustering::{
    assign_with, dac_augment, e_step, fit_gmm, hard_assign, m_step, select_k, CovarianceKind, EmConfig,
    GmmModel, Standardizer,
};
use lhcf::dataset::{AttributeSchema, EmbeddingDataset, SampleRecord};
use lhcf::numerics::{Matrix, Rng};
use lhcf::synth::{generate, SynthSpec};
use proptest::prelude::*;

fn blobs(k: usize, d: usize, n: usize, separation: f64, seed: u64) -> Matrix {
    generate(&SynthSpec::simple(k, d, n, separation, seed)).unwrap().dataset.embeddings()
}

fn permuted(m: &GmmModel, perm: &[usize]) -> GmmModel {
    let mut p = m.clone();
    p.weights = perm.iter().map(|&j| m.weights[j]).collect();
    p.means = perm.iter().map(|&j| m.means[j].clone()).collect();
    p.covariances = perm.iter().map(|&j| m.covariances[j].clone()).collect();
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn responsibilities_are_distributions(seed in any::<u64>(), k in 1usize..5, diag in any::<bool>()) {
        let z = blobs(3, 3, 300, 3.0, seed);
        let cfg = EmConfig {
            covariance: if diag { CovarianceKind::Diagonal } else { CovarianceKind::Full },
            ..EmConfig::default()
        };
        let m = fit_gmm(&z, k, &mut Rng::new(seed), &cfg).unwrap();
        let w: f64 = m.weights.iter().sum();
        prop_assert!((w - 1.0).abs() < 1e-9);
        prop_assert!(m.weights.iter().all(|&p| p > 0.0));
        prop_assert!(m.log_likelihood.is_finite());
        let g = e_step(&z, &m).unwrap();
        for row in g.iter_rows() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        // Mixture weights after an M-step are the mean responsibilities.
        let step = m_step(&z, &g, cfg.covariance, m.ridge);
        for c in 0..k {
            let mass: f64 = g.iter_rows().map(|r| r[c]).sum();
            prop_assert!((step.weights[c] - mass / z.rows() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_follow_component_permutations(seed in any::<u64>()) {
        let z = blobs(3, 2, 240, 5.0, seed);
        let m = fit_gmm(&z, 3, &mut Rng::new(seed), &EmConfig::default()).unwrap();
        let perm = [2usize, 0, 1];
        let base = assign_with(&z, &m).unwrap().hard_labels;
        let moved = assign_with(&z, &permuted(&m, &perm)).unwrap().hard_labels;
        for (a, b) in base.iter().zip(&moved) {
            prop_assert_eq!(perm[*b], *a);
        }
    }

    #[test]
    fn sweep_selects_bic_minimum(seed in any::<u64>()) {
        let z = blobs(2, 2, 200, 4.0, seed);
        let sweep = select_k(&z, 1..=4, 2, &Rng::new(seed), &EmConfig::default()).unwrap();
        let ks: Vec<usize> = sweep.candidates.iter().map(|c| c.k).collect();
        let mut sorted = ks.clone();
        sorted.sort();
        prop_assert_eq!(&ks, &sorted);
        let best = sweep.candidates.iter().map(|c| c.bic).fold(f64::INFINITY, f64::min);
        let chosen = sweep.candidates.iter().find(|c| c.k == sweep.selected).unwrap();
        prop_assert_eq!(chosen.bic, best);
    }
}

#[test]
fn restarts_keep_best_likelihood_and_are_order_independent() {
    let z = blobs(3, 3, 600, 4.0, 5);
    let a = select_k(&z, 1..=4, 3, &Rng::new(9), &EmConfig::default()).unwrap();
    let b = select_k(&z, 1..=4, 3, &Rng::new(9), &EmConfig::default()).unwrap();
    let bics = |s: &lhcf::clustering::BicSweep| s.candidates.iter().map(|c| c.bic.to_bits()).collect::<Vec<_>>();
    assert_eq!(bics(&a), bics(&b));
    for c in &a.candidates {
        for r in 0..3 {
            let m = fit_gmm(&z, c.k, &mut Rng::new(9).child(&[c.k as u64, r as u64]), &EmConfig::default());
            if let Ok(m) = m {
                assert!(m.log_likelihood <= c.model.log_likelihood + 1e-9);
            }
        }
    }
}

#[test]
fn single_blob_selects_one_component() {
    let z = blobs(1, 4, 2000, 0.0, 17);
    let sweep = select_k(&z, 1..=6, 3, &Rng::new(1), &EmConfig::default()).unwrap();
    assert_eq!(sweep.selected, 1);
}

#[test]
fn three_separated_blobs_select_three() {
    let mut hits = 0;
    for seed in 0..20 {
        let z = blobs(3, 4, 2000, 8.0, 500 + seed);
        let sweep = select_k(&z, 1..=6, 2, &Rng::new(seed), &EmConfig::default()).unwrap();
        hits += usize::from(sweep.selected == 3);
    }
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn one_dominant_component_collects_every_point() {
    let g = Matrix::from_rows(&[[0.1, 0.1, 0.1, 0.7], [0.0, 0.2, 0.2, 0.6], [0.3, 0.0, 0.0, 0.7]]).unwrap();
    assert_eq!(hard_assign(&g), vec![3, 3, 3]);
}

fn attribute_dataset() -> EmbeddingDataset {
    let mut rng = Rng::new(4);
    let schema = vec![
        AttributeSchema::categorical("gender", &["F", "M"]),
        AttributeSchema::categorical("age", &["a", "b", "c", "d"]),
    ];
    let records = (0..40)
        .map(|i| SampleRecord {
            id: format!("r{i}"),
            z: (0..3).map(|_| 2.0 * rng.normal() + 1.0).collect(),
            y: (i % 2) as u8,
            attrs: BTreeMap::from([("gender".into(), i % 2), ("age".into(), i % 4)]),
        })
        .collect();
    EmbeddingDataset::new(3, schema, records).unwrap()
}

#[test]
fn dac_augmentation_shapes() {
    let ds = attribute_dataset();
    let z = ds.embeddings();
    let standardized = Standardizer::fit(&z).apply(&z);

    let zero = dac_augment(&ds, &["gender"], 0.0).unwrap();
    for i in 0..ds.len() {
        assert_eq!(&zero.row(i)[..3], standardized.row(i));
        assert!(zero.row(i)[3..].iter().all(|&v| v == 0.0));
    }

    let one = dac_augment(&ds, &["gender"], 1.0).unwrap();
    assert_eq!(one.cols(), 5);
    for i in 0..ds.len() {
        assert_eq!(one.row(i)[3..].iter().filter(|&&v| v != 0.0).count(), 1);
    }

    assert_eq!(dac_augment(&ds, &["gender", "age"], 1.0).unwrap().cols(), 9);
}
