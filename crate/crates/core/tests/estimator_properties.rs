//! Invariance properties of the three point estimators.

use matchdid::estimators::{estimate_classic, estimate_matched_x, estimate_matched_xy};
use matchdid::matching::{MatchAssignment, MatchFeatures};
use matchdid::panel::PanelData;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn build_panel(y: Vec<Vec<f64>>, n1: usize) -> PanelData {
    let n = y.len();
    let t1 = y[0].len();
    let mut ym = DMatrix::zeros(n, t1);
    for (i, row) in y.iter().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            ym[(i, t)] = v;
        }
    }
    PanelData::new(
        (0..n).map(|i| format!("u{i}")).collect(),
        (0..n).map(|i| i < n1).collect(),
        ym,
        DMatrix::zeros(n, 0),
        t1 - 1,
        None,
    )
    .unwrap()
}

fn full_assignments(panel: &PanelData) -> (MatchAssignment, MatchAssignment) {
    let pairs: Vec<(usize, usize)> = panel
        .treated_indices()
        .into_iter()
        .zip(panel.control_indices())
        .collect();
    (
        MatchAssignment::perfect(pairs.clone(), panel.n(), MatchFeatures::CovariatesOnly),
        MatchAssignment::perfect(pairs, panel.n(), MatchFeatures::CovariatesAndPreOutcomes),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Adding the same per-period constant to every unit leaves all three
    /// estimates unchanged.
    #[test]
    fn per_period_shifts_cancel(
        rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 4..16),
        shifts in prop::collection::vec(-50.0f64..50.0, 3),
    ) {
        let n1 = rows.len() / 2;
        let panel = build_panel(rows.clone(), n1);
        let shifted_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&shifts).map(|(v, s)| v + s).collect())
            .collect();
        let shifted = build_panel(shifted_rows, n1);
        let (ax, axy) = full_assignments(&panel);

        let c0 = estimate_classic(&panel).unwrap().tau_hat;
        let c1 = estimate_classic(&shifted).unwrap().tau_hat;
        prop_assert!((c0 - c1).abs() < 1e-9);

        let x0 = estimate_matched_x(&panel, &ax).unwrap().tau_hat;
        let x1 = estimate_matched_x(&shifted, &ax).unwrap().tau_hat;
        prop_assert!((x0 - x1).abs() < 1e-9);

        let b0 = estimate_matched_xy(&panel, &axy).unwrap().tau_hat;
        let b1 = estimate_matched_xy(&shifted, &axy).unwrap().tau_hat;
        prop_assert!((b0 - b1).abs() < 1e-9);
    }

    /// With a single pre-period the generalized pre-average reduces to
    /// the plain first-period outcome, bit for bit.
    #[test]
    fn single_pre_period_reduces_to_the_two_period_form(
        rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 2), 4..12),
    ) {
        let n1 = rows.len() / 2;
        let panel = build_panel(rows.clone(), n1);
        let est = estimate_classic(&panel).unwrap().tau_hat;
        // Canonical two-period arithmetic: post minus first period, no
        // pre-averaging involved.
        let t_diffs: Vec<f64> = (0..n1).map(|i| rows[i][1] - rows[i][0]).collect();
        let c_diffs: Vec<f64> = (n1..rows.len()).map(|i| rows[i][1] - rows[i][0]).collect();
        let canonical = matchdid::stats::mean(&t_diffs) - matchdid::stats::mean(&c_diffs);
        prop_assert_eq!(est, canonical);
    }
}
