use lhcf::stats::{cd_diagram, friedman, mid_ranks, nemenyi_cd, parse_score_tsv, Direction, ScoreTable};
use proptest::prelude::*;

fn table() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (2usize..8, 2usize..12).prop_flat_map(|(k, n)| {
        (
            Just(k),
            prop::collection::vec(prop::collection::vec((0u32..6).prop_map(|v| v as f64 / 5.0), k), n),
        )
    })
}

fn build(k: usize, scores: Vec<Vec<f64>>, direction: Direction) -> ScoreTable {
    let n = scores.len();
    ScoreTable::new(
        (0..k).map(|j| format!("m{j}")).collect(),
        (0..n).map(|i| format!("s{i}")).collect(),
        scores,
        direction,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rank_rows_sum_to_constant((k, rows) in table(), higher in any::<bool>()) {
        let dir = if higher { Direction::Higher } else { Direction::Lower };
        for row in &rows {
            let r = mid_ranks(row, dir);
            let sum: f64 = r.iter().sum();
            prop_assert_eq!(sum, (k * (k + 1)) as f64 / 2.0);
            prop_assert!(r.iter().all(|&x| (1.0..=k as f64).contains(&x)));
        }
    }

    #[test]
    fn friedman_ignores_monotone_row_transforms((k, rows) in table(), shift in prop::collection::vec(-3.0f64..3.0, 12)) {
        let base = friedman(&build(k, rows.clone(), Direction::Higher), 0.05).unwrap();
        let moved: Vec<Vec<f64>> = rows
            .iter()
            .zip(&shift)
            .map(|(row, s)| row.iter().map(|v| (2.0 * v).exp() + s).collect())
            .collect();
        let other = friedman(&build(k, moved, Direction::Higher), 0.05).unwrap();
        prop_assert_eq!(&base.average_ranks, &other.average_ranks);
        prop_assert_eq!(base.friedman_statistic, other.friedman_statistic);
    }

    #[test]
    fn permuting_methods_permutes_ranks((k, rows) in table(), rot in 0usize..8) {
        let rot = rot % k;
        let base = friedman(&build(k, rows.clone(), Direction::Lower), 0.05).unwrap();
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| (0..k).map(|j| row[(j + rot) % k]).collect())
            .collect();
        let other = friedman(&build(k, rotated, Direction::Lower), 0.05).unwrap();
        for j in 0..k {
            prop_assert!((other.average_ranks[j] - base.average_ranks[(j + rot) % k]).abs() < 1e-12);
        }
        prop_assert!((other.friedman_statistic - base.friedman_statistic).abs() < 1e-9);
    }

    #[test]
    fn diagram_is_reproducible((k, rows) in table()) {
        let r = friedman(&build(k, rows.clone(), Direction::Higher), 0.10).unwrap();
        let again = friedman(&build(k, rows, Direction::Higher), 0.10).unwrap();
        prop_assert_eq!(cd_diagram(&r), cd_diagram(&again));
    }
}

#[test]
fn critical_difference_examples() {
    for n in [1, 4, 9, 100] {
        let cd = nemenyi_cd(2, n, 0.05).unwrap();
        assert!((cd - 1.960 * (1.0 / n as f64).sqrt()).abs() < 1e-12);
    }
    assert!((nemenyi_cd(3, 4, 0.05).unwrap() - 1.657).abs() < 5e-4);
    assert!(nemenyi_cd(5, 1_000_000, 0.05).unwrap() < 0.01);
    assert!(nemenyi_cd(21, 4, 0.05).is_err());
    assert!(nemenyi_cd(3, 4, 0.01).is_err());
}

#[test]
fn two_method_bars() {
    let close = build(2, vec![vec![0.9, 0.8], vec![0.7, 0.8], vec![0.6, 0.5]], Direction::Higher);
    let r = friedman(&close, 0.05).unwrap();
    assert_eq!(cd_diagram(&r).matches("class=\"group\"").count(), 1);

    let far = build(2, vec![vec![0.9, 0.1]; 12], Direction::Higher);
    let r = friedman(&far, 0.05).unwrap();
    assert_eq!(cd_diagram(&r).matches("class=\"group\"").count(), 0);
}

#[test]
fn tsv_rows_with_missing_cells_are_dropped() {
    let text = "setting\tA\tB\ns1\t0.9\tNA\ns2\t0.8\t0.7\ns3\t0.6\t0.5\n";
    let t = parse_score_tsv(text, None, Direction::Higher).unwrap();
    assert_eq!(t.settings, vec!["s2", "s3"]);
}
