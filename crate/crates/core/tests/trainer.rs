use std::collections::BTreeMap;

use lhcf::dataset::{intersect_attributes, make_splits, AttributeSchema, EmbeddingDataset, GroupLabels, SampleRecord, Split};
use lhcf::metrics::auc_from;
use lhcf::numerics::Rng;
use lhcf::synth::{generate, Rates, SynthSpec};
use lhcf::trainer::{predict, train, Architecture, ClassifierModel, FairnessConfig, Grouping, LossKind, TrainHyper};

fn fair(kind: LossKind, lambda: f64) -> FairnessConfig {
    FairnessConfig {
        loss_kind: kind,
        lambda,
        grouping: Grouping::HiddenCohorts,
    }
}

/// Standardized data separable by the sign of the first coordinate.
fn separable(seed: u64, n: usize) -> EmbeddingDataset {
    let mut rng = Rng::new(seed);
    let records = (0..n)
        .map(|i| {
            let y = (i % 2) as u8;
            let margin = 0.2 + rng.uniform();
            let mut z = vec![if y == 1 { margin } else { -margin }];
            z.extend((0..3).map(|_| rng.normal()));
            SampleRecord {
                id: format!("r{i}"),
                z,
                y,
                attrs: BTreeMap::new(),
            }
        })
        .collect();
    let ds = EmbeddingDataset::new(4, vec![], records).unwrap();
    make_splits(&ds, (0.6, 0.2, 0.2), &mut Rng::new(seed)).unwrap()
}

fn true_cohorts(names: usize, ds: &EmbeddingDataset, cohorts: &[usize]) -> GroupLabels {
    GroupLabels {
        names: (0..names).map(|k| format!("c{k}")).collect(),
        by_id: ds.records.iter().zip(cohorts).map(|(r, &c)| (r.id.clone(), c)).collect(),
    }
}

#[test]
fn separable_data_is_ranked_perfectly() {
    let ds = separable(3, 600);
    for arch in [Architecture::Linear, Architecture::Mlp { hidden: 16 }] {
        let hyper = TrainHyper {
            epochs: 50,
            ..Default::default()
        };
        let (_, report) = train(&ds, None, &FairnessConfig::erm(), &hyper, arch).unwrap();
        assert!(report.epochs.len() <= 50);
        assert!(report.best_val_auc >= 0.99, "{arch:?}: {}", report.best_val_auc);
    }
}

#[test]
fn full_batch_small_step_objective_never_increases() {
    let out = generate(&SynthSpec {
        flip_rates: Rates::PerCohort(vec![0.05, 0.2, 0.1]),
        label_signal: Rates::Uniform(1.5),
        ..SynthSpec::simple(3, 4, 600, 1.0, 8)
    })
    .unwrap();
    let groups = true_cohorts(3, &out.dataset, &out.cohorts);
    let n_train = out.dataset.indices(Split::Train).len();
    let hyper = TrainHyper {
        lr: 1e-3,
        epochs: 100,
        batch_size: n_train,
        patience: 1000,
        ..Default::default()
    };
    for arch in [Architecture::Linear, Architecture::Mlp { hidden: 8 }] {
        for (kind, lambda) in [(LossKind::None, 0.0), (LossKind::Worst, 1.0), (LossKind::Gap, 0.5)] {
            let (_, report) = train(&out.dataset, Some(&groups), &fair(kind, lambda), &hyper, arch).unwrap();
            assert_eq!(report.epochs.len(), 100);
            for w in report.epochs.windows(2) {
                assert!(
                    w[1].objective <= w[0].objective + 1e-12,
                    "{arch:?} {kind:?}: epoch {} objective rose {} -> {}",
                    w[1].epoch,
                    w[0].objective,
                    w[1].objective
                );
            }
        }
    }
}

#[test]
fn zero_lambda_trains_exactly_like_erm() {
    let out = generate(&SynthSpec {
        label_signal: Rates::Uniform(2.0),
        ..SynthSpec::simple(3, 3, 400, 3.0, 2)
    })
    .unwrap();
    let groups = true_cohorts(3, &out.dataset, &out.cohorts);
    let hyper = TrainHyper {
        epochs: 20,
        momentum: 0.9,
        seed: 5,
        ..Default::default()
    };
    let arch = Architecture::Mlp { hidden: 6 };
    let (base, base_report) = train(&out.dataset, Some(&groups), &FairnessConfig::erm(), &hyper, arch).unwrap();
    for kind in [LossKind::Worst, LossKind::Gap] {
        let (m, report) = train(&out.dataset, Some(&groups), &fair(kind, 0.0), &hyper, arch).unwrap();
        let bits = |m: &ClassifierModel| m.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&base));
        let objectives = |r: &lhcf::trainer::TrainReport| r.epochs.iter().map(|e| e.mean_clss.to_bits()).collect::<Vec<_>>();
        assert_eq!(objectives(&report), objectives(&base_report));
    }
}

#[test]
fn grouping_source_does_not_matter() {
    let mut out = generate(&SynthSpec {
        label_signal: Rates::Uniform(2.0),
        flip_rates: Rates::PerCohort(vec![0.0, 0.15]),
        ..SynthSpec::simple(2, 3, 400, 3.0, 4)
    })
    .unwrap();
    // Expose the generating cohort as a visible attribute.
    out.dataset.schema.push(AttributeSchema::categorical("cohort", &["0", "1"]));
    for (r, &c) in out.dataset.records.iter_mut().zip(&out.cohorts) {
        r.attrs.insert("cohort".into(), c);
    }
    let visible = GroupLabels::from(&intersect_attributes(&out.dataset, &["cohort"]).unwrap());
    let hidden = GroupLabels {
        names: vec!["cohort0".into(), "cohort1".into()],
        ..true_cohorts(2, &out.dataset, &out.cohorts)
    };
    let hyper = TrainHyper {
        epochs: 15,
        ..Default::default()
    };
    let a = train(&out.dataset, Some(&visible), &fair(LossKind::Worst, 1.0), &hyper, Architecture::Linear).unwrap();
    let cfg = FairnessConfig {
        grouping: Grouping::VisiblePartition("cohort".into()),
        ..fair(LossKind::Worst, 1.0)
    };
    let b = train(&out.dataset, Some(&hidden), &cfg, &hyper, Architecture::Linear).unwrap();
    assert_eq!(a.0.params, b.0.params);
    assert_eq!(a.1, b.1);
}

/// Minority cohort whose label signal points against the majority's.
fn biased_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        cohort_weights: Some(vec![0.45, 0.45, 0.10]),
        flip_rates: Rates::PerCohort(vec![0.02, 0.02, 0.05]),
        label_signal: Rates::Uniform(2.5),
        signal_overlap: Rates::PerCohort(vec![1.0, 1.0, -0.5]),
        ..SynthSpec::simple(3, 6, 3000, 4.0, seed)
    }
}

fn worst_cohort_val_auc(ds: &EmbeddingDataset, cohorts: &[usize], model: &ClassifierModel) -> f64 {
    let idx = ds.indices(Split::Val);
    let scores = predict(model, &ds.embeddings_of(&idx)).unwrap();
    let mut worst = f64::INFINITY;
    for c in 0..3 {
        let (s, y): (Vec<f64>, Vec<u8>) = idx
            .iter()
            .zip(&scores)
            .filter(|(&i, _)| cohorts[i] == c)
            .map(|(&i, &p)| (p, ds.records[i].y))
            .unzip();
        worst = worst.min(auc_from(&s, &y).unwrap());
    }
    worst
}

#[test]
fn worst_cohort_loss_lifts_the_worst_cohort() {
    let mut wins = 0;
    for seed in 0..10 {
        let out = generate(&biased_spec(seed)).unwrap();
        let groups = true_cohorts(3, &out.dataset, &out.cohorts);
        let hyper = TrainHyper {
            seed,
            ..Default::default()
        };
        let (erm, _) = train(&out.dataset, Some(&groups), &FairnessConfig::erm(), &hyper, Architecture::Linear).unwrap();
        let (wst, _) = train(&out.dataset, Some(&groups), &fair(LossKind::Worst, 1.0), &hyper, Architecture::Linear).unwrap();
        let a = worst_cohort_val_auc(&out.dataset, &out.cohorts, &erm);
        let b = worst_cohort_val_auc(&out.dataset, &out.cohorts, &wst);
        wins += usize::from(b > a);
    }
    assert!(wins >= 8, "{wins}/10");
}

#[test]
fn fairness_loss_without_groups_is_rejected() {
    let ds = separable(1, 60);
    let err = train(&ds, None, &fair(LossKind::Gap, 1.0), &TrainHyper::default(), Architecture::Linear).unwrap_err();
    assert!(matches!(err, lhcf::Error::NoGroups));
}
