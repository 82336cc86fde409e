use std::collections::{BTreeMap, BTreeSet};

use lhcf::dataset::{
    intersect_attributes, load_dataset, make_splits, save_dataset, AttributeSchema, EmbeddingDataset,
    SampleRecord, Split,
};
use lhcf::numerics::Rng;
use lhcf::Error;
use proptest::prelude::*;

/// Random dataset: values drawn from a wide range of magnitudes, a binary
/// and a ternary attribute, each missing for some records.
fn random_dataset(seed: u64, n: usize, d: usize) -> EmbeddingDataset {
    let mut rng = Rng::new(seed);
    let schema = vec![
        AttributeSchema::categorical("sex", &["F", "M"]),
        AttributeSchema::categorical("site", &["a", "b", "c"]),
    ];
    let records = (0..n)
        .map(|i| {
            let z = (0..d)
                .map(|_| rng.normal() * 10f64.powi(rng.below(13) as i32 - 6))
                .collect();
            let mut attrs = BTreeMap::new();
            if rng.uniform() < 0.9 {
                attrs.insert("sex".to_string(), rng.below(2));
            }
            if rng.uniform() < 0.8 {
                attrs.insert("site".to_string(), rng.below(3));
            }
            SampleRecord {
                id: format!("r{i}"),
                z,
                y: u8::from(rng.uniform() < 0.4),
                attrs,
            }
        })
        .collect();
    EmbeddingDataset::new(d, schema, records).unwrap()
}

fn class_counts(ds: &EmbeddingDataset, split: Split) -> [usize; 2] {
    let mut c = [0; 2];
    for i in ds.indices(split) {
        c[ds.records[i].y as usize] += 1;
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn save_load_round_trip_is_bit_exact(seed in any::<u64>(), n in 1usize..60, d in 1usize..6) {
        let ds = random_dataset(seed, n, d);
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("d.manifest.json");
        save_dataset(&ds, &manifest, &dir.path().join("d.tsv")).unwrap();
        let back = load_dataset(&manifest).unwrap();
        prop_assert_eq!(&back, &ds);
        for (a, b) in back.records.iter().zip(&ds.records) {
            for (x, y) in a.z.iter().zip(&b.z) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn intersections_are_disjoint_and_cover_attributed_records(seed in any::<u64>(), n in 1usize..80, which in 0usize..3) {
        let ds = random_dataset(seed, n, 2);
        let attrs: Vec<&str> = match which {
            0 => vec!["sex"],
            1 => vec!["site"],
            _ => vec!["sex", "site"],
        };
        let p = intersect_attributes(&ds, &attrs).unwrap();
        let mut seen = BTreeSet::new();
        for g in &p.groups {
            prop_assert!(!g.ids.is_empty());
            for id in &g.ids {
                prop_assert!(seen.insert(id.clone()), "id {} in two groups", id);
            }
        }
        let expected: BTreeSet<String> = ds
            .records
            .iter()
            .filter(|r| attrs.iter().all(|a| r.attrs.contains_key(*a)))
            .map(|r| r.id.clone())
            .collect();
        prop_assert_eq!(seen, expected);
    }

    #[test]
    fn splits_are_reproducible_and_count_stable(seed in any::<u64>(), other in any::<u64>(), n in 30usize..120) {
        let ds = random_dataset(seed, n, 2);
        let f = (0.6, 0.2, 0.2);
        let a = make_splits(&ds, f, &mut Rng::new(seed)).unwrap();
        let b = make_splits(&ds, f, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(&a.splits, &b.splits);
        let c = make_splits(&ds, f, &mut Rng::new(other.wrapping_add(1).wrapping_add(seed))).unwrap();
        for s in Split::ALL {
            prop_assert_eq!(class_counts(&a, s), class_counts(&c, s));
        }
        // Per-class counts are within one sample of the exact fraction.
        let sizes = [0u8, 1].map(|y| ds.records.iter().filter(|r| r.y == y).count());
        for (s, frac) in Split::ALL.iter().zip([f.0, f.1, f.2]) {
            let got = class_counts(&a, *s);
            for y in 0..2 {
                prop_assert!((got[y] as f64 - frac * sizes[y] as f64).abs() < 1.0);
            }
        }
    }
}

#[test]
fn different_seeds_change_membership() {
    let ds = random_dataset(3, 200, 2);
    let a = make_splits(&ds, (0.7, 0.1, 0.2), &mut Rng::new(1)).unwrap();
    let b = make_splits(&ds, (0.7, 0.1, 0.2), &mut Rng::new(2)).unwrap();
    assert_ne!(a.splits, b.splits);
}

#[test]
fn hundred_balanced_records_split_exactly() {
    let records = (0..100)
        .map(|i| SampleRecord {
            id: format!("r{i}"),
            z: vec![i as f64],
            y: (i % 2) as u8,
            attrs: BTreeMap::new(),
        })
        .collect();
    let ds = EmbeddingDataset::new(1, vec![], records).unwrap();
    let s = make_splits(&ds, (0.8, 0.1, 0.1), &mut Rng::new(0)).unwrap();
    assert_eq!(class_counts(&s, Split::Train), [40, 40]);
    assert_eq!(class_counts(&s, Split::Val), [5, 5]);
    assert_eq!(class_counts(&s, Split::Test), [5, 5]);
}

#[test]
fn tiny_class_is_rejected() {
    let records = (0..6)
        .map(|i| SampleRecord {
            id: format!("r{i}"),
            z: vec![0.0],
            y: u8::from(i == 0),
            attrs: BTreeMap::new(),
        })
        .collect();
    let ds = EmbeddingDataset::new(1, vec![], records).unwrap();
    assert!(matches!(
        make_splits(&ds, (0.6, 0.2, 0.2), &mut Rng::new(0)),
        Err(Error::TooFewSamples(_))
    ));
}

#[test]
fn unknown_attribute_is_reported() {
    let ds = random_dataset(1, 10, 2);
    assert!(matches!(
        intersect_attributes(&ds, &["age"]),
        Err(Error::UnknownAttribute(a)) if a == "age"
    ));
}

#[test]
fn loader_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let ds = random_dataset(5, 4, 3);
    let manifest = dir.path().join("m.json");
    let tsv = dir.path().join("d.tsv");
    save_dataset(&ds, &manifest, &tsv).unwrap();
    let text = std::fs::read_to_string(&tsv).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[3] = lines[3].rsplit_once('\t').unwrap().0.to_string();
    std::fs::write(&tsv, lines.join("\n") + "\n").unwrap();
    match load_dataset(&manifest) {
        Err(Error::DimensionMismatch { expected: 3, got: 2, .. }) => {}
        Err(Error::Parse { line: 4, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}
