#![allow(dead_code)]

//! Shared generators for the integration and acceptance suites.

use matchdid::dgp::{CanonicalParams, DgpParams, LatentLaw};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Admissible univariate two-period parameters with |rho| capped.
pub fn random_canonical(rng: &mut ChaCha8Rng, rho_cap: f64) -> CanonicalParams {
    CanonicalParams {
        beta0: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        beta_theta: [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)],
        beta_x: [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)],
        mu_theta: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
        mu_x: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
        sigma_theta: rng.gen_range(0.5..1.5),
        sigma_x: rng.gen_range(0.5..1.5),
        rho: rng.gen_range(-rho_cap..rho_cap),
        sigma_e2: rng.gen_range(0.5..2.0),
        tau: rng.gen_range(-1.0..1.0),
    }
}

/// Random admissible structural parameters. The joint trait covariance is
/// built as L L' with a random lower-triangular L (positive diagonal), so
/// every block is well conditioned by construction.
pub fn random_dgp(
    rng: &mut ChaCha8Rng,
    q_max: usize,
    p_max: usize,
    t_max: usize,
    tau: f64,
) -> DgpParams {
    let q = rng.gen_range(1..=q_max);
    let p = rng.gen_range(1..=p_max);
    let t = rng.gen_range(1..=t_max);
    let d = q + p;
    let mut l = DMatrix::zeros(d, d);
    for r in 0..d {
        for c in 0..r {
            l[(r, c)] = rng.gen_range(-0.5..0.5);
        }
        l[(r, r)] = rng.gen_range(0.7..1.3);
    }
    let joint = &l * l.transpose();
    let sigma_theta_theta = joint.view((0, 0), (q, q)).into_owned();
    let sigma_xx = joint.view((q, q), (p, p)).into_owned();
    let sigma_theta_x = joint.view((0, q), (q, p)).into_owned();

    let rand_vec = |rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64| {
        DVector::from_fn(dim, |_, _| rng.gen_range(lo..hi))
    };
    DgpParams {
        n_units: 2000,
        p_treated: rng.gen_range(0.2..0.5),
        t_pre: t,
        beta0: (0..=t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        beta_theta: (0..=t).map(|_| rand_vec(rng, q, -1.2, 1.2)).collect(),
        beta_x: (0..=t).map(|_| rand_vec(rng, p, -1.2, 1.2)).collect(),
        mu_theta: [rand_vec(rng, q, -0.5, 0.5), rand_vec(rng, q, -0.5, 0.5)],
        mu_x: [rand_vec(rng, p, -0.5, 0.5), rand_vec(rng, p, -0.5, 0.5)],
        sigma_theta_theta,
        sigma_xx,
        sigma_theta_x,
        sigma_e2: rng.gen_range(0.5..1.5),
        tau,
        latent_law: LatentLaw::Gaussian,
    }
}

/// Sample mean and its Monte Carlo standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = matchdid::stats::mean(values);
    let v = matchdid::stats::sample_variance(values);
    (m, (v / values.len() as f64).sqrt())
}
