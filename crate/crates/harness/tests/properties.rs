use proptest::prelude::*;
use timesteer_harness::report::{aggregate, sort_rows, Row};
use timesteer_harness::select::pick_alpha;
use timesteer_harness::stats::spearman;
use timesteer_harness::{ExperimentConfig, ExperimentKind, ExperimentReport};

fn grid_and_scores() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    prop::collection::btree_set(-8i32..=8, 1..10).prop_flat_map(|set| {
        let grid: Vec<f64> = set.into_iter().map(|a| a as f64 * 0.5).collect();
        let n = grid.len();
        (Just(grid), prop::collection::vec(0usize..6, n))
    })
}

fn row() -> impl Strategy<Value = Row> {
    (
        0i64..3,
        prop::option::of(0i64..3),
        prop::sample::select(vec!["baseline", "mean_diff", "svd"]),
        prop::option::of(prop::sample::select(vec![-2.0, 1.0, 3.0])),
        any::<bool>(),
        1u64..4,
        0usize..=50,
    )
        .prop_map(|(s, t, method, alpha, selected, seed, correct)| {
            let mut r = Row::new(ExperimentKind::Matrix, s, method, seed, 50, correct as f64 / 50.0, 0.5);
            if let Some(t) = t {
                r = r.eval(t);
            }
            if let Some(a) = alpha {
                r = r.alpha(a, selected);
            }
            r
        })
}

/// Rows with distinct sort keys, as every real report has.
fn rows(max: usize) -> impl Strategy<Value = Vec<Row>> {
    prop::collection::vec(row(), 0..max).prop_map(|rs| {
        let mut seen = std::collections::BTreeSet::new();
        rs.into_iter()
            .filter(|r| {
                seen.insert((
                    r.train_period,
                    r.eval_period,
                    r.method.clone(),
                    r.alpha.map(f64::to_bits),
                    r.selected,
                    r.seed,
                ))
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn picked_alpha_is_best_and_breaks_ties_by_magnitude_then_sign((grid, scores) in grid_and_scores()) {
        let a = pick_alpha(&grid, &scores).unwrap();
        let best = *scores.iter().max().unwrap();
        let tied: Vec<f64> = grid.iter().zip(&scores).filter(|(_, s)| **s == best).map(|(g, _)| *g).collect();
        prop_assert!(tied.contains(&a));
        let smallest = tied.iter().map(|g| g.abs()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(a.abs(), smallest);
        if a < 0.0 {
            prop_assert!(!tied.contains(&-a));
        }
    }

    #[test]
    fn spearman_is_bounded_symmetric_and_rank_based(
        xs in prop::collection::vec(-50i32..50, 3..20),
        ys in prop::collection::vec(-50i32..50, 3..20),
    ) {
        let n = xs.len().min(ys.len());
        let x: Vec<f64> = xs[..n].iter().map(|v| *v as f64).collect();
        let y: Vec<f64> = ys[..n].iter().map(|v| *v as f64).collect();
        if let Some(r) = spearman(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert_eq!(spearman(&y, &x), Some(r));
            let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + 7.0).collect();
            let r2 = spearman(&cubed, &y).unwrap();
            prop_assert!((r - r2).abs() < 1e-12);
            prop_assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sorting_ignores_input_order(rows in rows(30), rot in 0usize..30) {
        let mut a = rows.clone();
        let mut b = rows.clone();
        if !b.is_empty() {
            let k = rot % b.len();
            b.rotate_left(k);
            b.reverse();
        }
        sort_rows(&mut a);
        sort_rows(&mut b);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(aggregate(&a), aggregate(&b));
    }

    #[test]
    fn aggregates_cover_every_row(rows in prop::collection::vec(row(), 0..30)) {
        let aggs = aggregate(&rows);
        prop_assert_eq!(aggs.iter().map(|a| a.n).sum::<usize>(), rows.len());
        for a in &aggs {
            prop_assert!(a.accuracy_std >= 0.0);
            prop_assert!((0.0..=1.0).contains(&a.accuracy_mean));
        }
    }

    #[test]
    fn reports_round_trip_and_emit_one_csv_line_per_row(rows in prop::collection::vec(row(), 0..20)) {
        let report = ExperimentReport::new(ExperimentConfig::preset(ExperimentKind::Matrix), rows.clone(), 1.5);
        let back: ExperimentReport = serde_json::from_str(&report.to_json()).unwrap();
        prop_assert_eq!(&back, &report);
        prop_assert_eq!(back.to_csv().unwrap(), report.to_csv().unwrap());
        prop_assert_eq!(report.to_csv().unwrap().lines().count(), rows.len() + 1);
        prop_assert_eq!(report.to_tsv().lines().count(), 3 * rows.len() + 1);
    }
}
