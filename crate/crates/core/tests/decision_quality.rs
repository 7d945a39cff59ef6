//! End-to-end quality of the guideline: when the population MSE ranking
//! has a wide margin, the data-driven decision should recover it.

use matchdid::decision::{decide, GuidelineConfig};
use matchdid::dgp::{simulate, CanonicalParams, LatentLaw};
use matchdid::estimators::EstimatorKind;
use matchdid::matching::MatchMethod;
use matchdid::oracle::mse_generalized;

/// Covariate channel broken (classic badly biased), latent imbalance with
/// stable latent slopes (zero bias for covariate matching, substantial
/// bias for pre-outcome matching): matching on covariates alone wins the
/// MSE ranking by a wide margin.
fn clear_winner_params() -> CanonicalParams {
    CanonicalParams {
        beta0: [0.0, 0.0],
        beta_theta: [2.0, 2.0],
        beta_x: [1.0, 1.8],
        mu_theta: [0.0, 0.8],
        mu_x: [0.0, 0.7],
        sigma_theta: 1.0,
        sigma_x: 1.0,
        rho: 0.0,
        sigma_e2: 1.0,
        tau: 0.0,
    }
}

#[test]
fn bootstrap_se_tracks_the_sampling_distribution() {
    // The stratified bootstrap SE of the unmatched estimate on one panel
    // should land within 20% of the standard deviation of the estimate
    // across fresh panels from the same process.
    let c = CanonicalParams {
        beta0: [0.0, 0.0],
        beta_theta: [1.0, 1.3],
        beta_x: [0.8, 1.0],
        mu_theta: [0.0, 0.4],
        mu_x: [0.0, 0.3],
        sigma_theta: 1.0,
        sigma_x: 1.0,
        rho: 0.25,
        sigma_e2: 1.0,
        tau: 1.0,
    };
    let params = c.to_dgp(2_000, 0.25, LatentLaw::Gaussian);

    let mut fresh = Vec::new();
    for seed in 0..300 {
        let panel = simulate(&params, 90_000 + seed).unwrap();
        fresh.push(
            matchdid::estimators::estimate_classic(&panel)
                .unwrap()
                .tau_hat,
        );
    }
    let mc_sd = matchdid::stats::sample_variance(&fresh).sqrt();

    let panel = simulate(&params, 123).unwrap();
    let config = GuidelineConfig {
        bootstrap_reps: 0,
        match_method: MatchMethod::NearestNeighbor,
        standardize_features: false,
        ..GuidelineConfig::default()
    };
    let dist = matchdid::decision::bootstrap_reports(&panel, &config, 1_000, 55).unwrap();
    let se = dist.standard_errors().tau.classic;
    assert!(
        (se - mc_sd).abs() / mc_sd < 0.20,
        "bootstrap SE {se} vs Monte Carlo SD {mc_sd}"
    );
}

#[test]
fn decide_recovers_a_wide_margin_mse_winner() {
    let params = clear_winner_params().to_dgp(5_000, 0.1, LatentLaw::Gaussian);
    let n1 = 500;
    let n0 = 4_500;
    let oracle = mse_generalized(&params, n1, n0).unwrap();
    let mses = oracle.per_estimator.map(|m| m.mse);
    // The margin must be at least 3x for this invariant to apply.
    assert!(mses.classic / mses.matched_x > 3.0);
    assert!(mses.matched_xy / mses.matched_x > 3.0);

    let config = GuidelineConfig {
        bootstrap_reps: 0,
        match_method: MatchMethod::NearestNeighbor,
        standardize_features: false,
        ..GuidelineConfig::default()
    };
    let mut hits = 0;
    let trials = 200;
    for seed in 0..trials {
        let panel = simulate(&params, 40_000 + seed).unwrap();
        let decision = decide(&panel, &config).unwrap();
        if decision.chosen == EstimatorKind::MatchedX {
            hits += 1;
        }
    }
    assert!(
        hits * 100 >= trials * 95,
        "decision picked the oracle winner only {hits}/{trials} times"
    );
}
