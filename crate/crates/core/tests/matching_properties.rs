//! Property tests for the matcher: injectivity, optimality ceiling,
//! determinism, and the vanishing-discrepancy rate diagnostics.

use matchdid::matching::{
    discrepancy_report, match_panel, optimal_match, MatchFeatures, MatchMethod, MatchSpec,
};
use matchdid::panel::PanelData;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn panel_from_features(treated: &[Vec<f64>], controls: &[Vec<f64>]) -> PanelData {
    let d = treated[0].len();
    let n = treated.len() + controls.len();
    let mut x = DMatrix::zeros(n, d);
    let mut z = Vec::with_capacity(n);
    for (i, f) in treated.iter().chain(controls.iter()).enumerate() {
        for (j, &v) in f.iter().enumerate() {
            x[(i, j)] = v;
        }
        z.push(i < treated.len());
    }
    PanelData::new(
        (0..n).map(|i| format!("u{i}")).collect(),
        z,
        DMatrix::zeros(n, 2),
        x,
        1,
        None,
    )
    .unwrap()
}

fn nn_spec(standardize: bool) -> MatchSpec {
    MatchSpec {
        features: MatchFeatures::CovariatesOnly,
        method: MatchMethod::NearestNeighbor,
        standardize,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn injectivity_and_flag_consistency(
        treated in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2), 1..12),
        controls in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2), 12..30),
        standardize in any::<bool>(),
    ) {
        let panel = panel_from_features(&treated, &controls);
        let a = match_panel(&panel, &nn_spec(standardize)).unwrap();
        // No control reused.
        let mut seen = std::collections::HashSet::new();
        for &(_, c) in a.pairs() {
            prop_assert!(seen.insert(c));
            prop_assert!(!panel.is_treated(c));
        }
        // Flags agree with pairs, counts add up.
        let flagged = (0..panel.n()).filter(|&i| a.is_matched_control(i)).count();
        prop_assert_eq!(flagged, a.n_matched());
        prop_assert_eq!(a.n_matched() + a.unmatched_treated().len(), treated.len());
        // Second moment dominates the squared first moment.
        prop_assert!(a.xi_n() + 1e-12 >= a.delta_n() * a.delta_n());
    }

    #[test]
    fn optimal_never_worse_than_greedy(
        treated in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 1..10),
        controls in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 10..24),
    ) {
        let panel = panel_from_features(&treated, &controls);
        let greedy = match_panel(&panel, &nn_spec(false)).unwrap();
        let optimal = optimal_match(&panel, &nn_spec(false)).unwrap();
        prop_assert!(optimal.total_distance() <= greedy.total_distance() + 1e-9);
        prop_assert_eq!(optimal.n_matched(), greedy.n_matched());
    }

    #[test]
    fn matching_is_deterministic(
        treated in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1), 1..8),
        controls in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1), 8..20),
    ) {
        let panel = panel_from_features(&treated, &controls);
        let a = match_panel(&panel, &nn_spec(true)).unwrap();
        let b = match_panel(&panel, &nn_spec(true)).unwrap();
        prop_assert_eq!(a.pairs(), b.pairs());
        prop_assert_eq!(a.delta_n(), b.delta_n());
    }
}

#[test]
fn discrepancy_rate_shrinks_with_sample_size() {
    // Continuous 1-d features with a 4:1 control reservoir: the scaled
    // discrepancy delta_n * sqrt(n) must fall as n grows.
    let mut scaled = Vec::new();
    for (n1, seed) in [(200usize, 11u64), (2_000, 12), (20_000, 13)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let treated: Vec<Vec<f64>> = (0..n1).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
        let controls: Vec<Vec<f64>> = (0..4 * n1).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
        let panel = panel_from_features(&treated, &controls);
        let a = match_panel(&panel, &nn_spec(false)).unwrap();
        let report = discrepancy_report(&a, panel.n());
        scaled.push(report.delta_scaled);
    }
    assert!(
        scaled[0] > scaled[1] && scaled[1] > scaled[2],
        "scaled discrepancies not decreasing: {scaled:?}"
    );
}

#[test]
fn exact_matching_succeeds_on_shared_discrete_support() {
    // 4-point support covered by both groups: exact matching should
    // essentially always succeed at n = 5000.
    let mut successes = 0;
    let trials = 100;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
        let n1 = 1000;
        let n0 = 4000;
        let treated: Vec<Vec<f64>> = (0..n1)
            .map(|_| vec![rng.gen_range(0..4) as f64])
            .collect();
        let controls: Vec<Vec<f64>> = (0..n0)
            .map(|_| vec![rng.gen_range(0..4) as f64])
            .collect();
        let panel = panel_from_features(&treated, &controls);
        let spec = MatchSpec {
            method: MatchMethod::Exact,
            ..nn_spec(false)
        };
        if match_panel(&panel, &spec).is_ok() {
            successes += 1;
        }
    }
    assert!(
        successes >= 99,
        "exact matching succeeded only {successes}/{trials} times"
    );
}

#[test]
fn caliper_unmatched_flow_into_the_report() {
    let treated = vec![vec![0.0], vec![100.0]];
    let controls = vec![vec![0.1], vec![0.2], vec![0.3]];
    let panel = panel_from_features(&treated, &controls);
    let spec = MatchSpec {
        method: MatchMethod::Caliper { width: 1.0 },
        ..nn_spec(false)
    };
    let a = match_panel(&panel, &spec).unwrap();
    assert_eq!(a.n_matched(), 1);
    assert_eq!(a.unmatched_treated().len(), 1);
    let csv = a.to_csv(&panel);
    assert!(csv.lines().count() == 2); // header + one pair
}
