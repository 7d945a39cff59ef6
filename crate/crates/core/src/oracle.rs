//! Closed-form population moments of the three estimators, evaluated
//! directly from the structural parameters. Ground truth for Monte Carlo
//! and plug-in validation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::{CanonicalParams, DgpParams};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::stats::{spd_solve, spectral_norm};

/// One value per estimator strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorTriple<T> {
    pub classic: T,
    pub matched_x: T,
    pub matched_xy: T,
}

impl<T: Copy> EstimatorTriple<T> {
    pub fn get(&self, kind: EstimatorKind) -> T {
        match kind {
            EstimatorKind::ClassicDid => self.classic,
            EstimatorKind::MatchedX => self.matched_x,
            EstimatorKind::MatchedXY => self.matched_xy,
        }
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.classic, self.matched_x, self.matched_xy]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> EstimatorTriple<U> {
        EstimatorTriple {
            classic: f(self.classic),
            matched_x: f(self.matched_x),
            matched_xy: f(self.matched_xy),
        }
    }
}

impl<T> EstimatorTriple<T> {
    pub fn from_fn(mut f: impl FnMut(EstimatorKind) -> T) -> Self {
        EstimatorTriple {
            classic: f(EstimatorKind::ClassicDid),
            matched_x: f(EstimatorKind::MatchedX),
            matched_xy: f(EstimatorKind::MatchedXY),
        }
    }
}

/// Derived population structure shared by every closed-form moment:
/// time-variation and imbalance vectors, the residualized latent
/// covariance, and the reliability matrix.
#[derive(Debug, Clone)]
pub struct DerivedStructure {
    /// Post-period latent slope minus the pre-period average.
    pub delta_theta: DVector<f64>,
    /// Post-period covariate slope minus the pre-period average.
    pub delta_x_coeff: DVector<f64>,
    /// Treated-minus-control mean of theta.
    pub delta_theta_groups: DVector<f64>,
    /// Treated-minus-control mean of X.
    pub delta_x_groups: DVector<f64>,
    /// Latent covariance after regressing out X.
    pub sigma_tilde: DMatrix<f64>,
    /// Latent imbalance after regressing out X.
    pub delta_tilde: DVector<f64>,
    /// Stacked pre-period latent slopes, T x q.
    pub b_theta: DMatrix<f64>,
    /// Noise covariance of the pre-period outcome vector.
    pub sigma_eps: DMatrix<f64>,
    /// Reliability matrix: share of residualized pre-outcome variation
    /// attributable to the latent trait.
    pub r_matrix: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Computes the derived structure. Solves the linear systems behind
/// every inverse via factorization with a condition-number guard; no
/// explicit matrix inverses.
pub fn derive_structure(params: &DgpParams) -> Result<DerivedStructure> {
    let report = crate::dgp::validate_params(params);
    if !report.is_valid() {
        return Err(Error::InvalidParams(report.violations.join("; ")));
    }
    let t = params.t_pre;
    let q = params.q();
    let mut warnings = Vec::new();

    let inv_t = 1.0 / t as f64;
    let mut pre_avg_theta = DVector::zeros(q);
    let mut pre_avg_x = DVector::zeros(params.p());
    for s in 0..t {
        pre_avg_theta += &params.beta_theta[s];
        pre_avg_x += &params.beta_x[s];
    }
    let delta_theta = &params.beta_theta[t] - pre_avg_theta * inv_t;
    let delta_x_coeff = &params.beta_x[t] - pre_avg_x * inv_t;
    let delta_theta_groups = &params.mu_theta[1] - &params.mu_theta[0];
    let delta_x_groups = &params.mu_x[1] - &params.mu_x[0];

    // sigma_xx^{-1} applied to the cross block and to the imbalance.
    let sigma_x_theta = params.sigma_theta_x.transpose();
    let solved_cross = spd_solve(
        &params.sigma_xx,
        &sigma_x_theta,
        "covariate covariance",
        &mut warnings,
    )?;
    let solved_imbalance = spd_solve(
        &params.sigma_xx,
        &DMatrix::from_column_slice(params.p(), 1, delta_x_groups.as_slice()),
        "covariate covariance",
        &mut warnings,
    )?;
    let sigma_tilde = &params.sigma_theta_theta - &params.sigma_theta_x * &solved_cross;
    let sigma_tilde = (&sigma_tilde + sigma_tilde.transpose()) * 0.5;
    let delta_tilde =
        &delta_theta_groups - &params.sigma_theta_x * solved_imbalance.column(0);

    let b_theta = params.b_theta();
    let sigma_eps = DMatrix::identity(t, t) * params.sigma_e2;
    let s = &b_theta * &sigma_tilde * b_theta.transpose() + &sigma_eps;
    let solved_b = spd_solve(&s, &b_theta, "pre-outcome covariance", &mut warnings)?;
    let r_matrix = &sigma_tilde * b_theta.transpose() * solved_b;

    Ok(DerivedStructure {
        delta_theta,
        delta_x_coeff,
        delta_theta_groups,
        delta_x_groups,
        sigma_tilde,
        delta_tilde,
        b_theta,
        sigma_eps,
        r_matrix,
        warnings,
    })
}

/// Variance as (core, sample-size factor, full) so that core-only
/// consistency statements map cleanly onto the plug-in estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParts {
    pub core: f64,
    pub factor: f64,
    pub full: f64,
}

/// Upfront sample-size coefficient per estimator. Matched estimators use
/// the realized number of matches; under 1:1 matching without drops that
/// equals n1.
pub fn sample_factor(kind: EstimatorKind, n1: usize, n0: usize, n_tilde: usize) -> f64 {
    match kind {
        EstimatorKind::ClassicDid => 1.0 / n1 as f64 + 1.0 / n0 as f64,
        EstimatorKind::MatchedX | EstimatorKind::MatchedXY => {
            1.0 / n1 as f64 + 1.0 / n_tilde as f64
        }
    }
}

fn check_sizes(n1: usize, n0: usize) -> Result<()> {
    if n1 == 0 || n0 == 0 {
        return Err(Error::InvalidParams(
            "sample sizes must be positive".into(),
        ));
    }
    Ok(())
}

/// Core (bracketed) variance factors of the three generalized estimators.
pub fn variance_core_generalized(params: &DgpParams) -> Result<EstimatorTriple<f64>> {
    let d = derive_structure(params)?;
    Ok(variance_core_from_structure(params, &d))
}

fn variance_core_from_structure(params: &DgpParams, d: &DerivedStructure) -> EstimatorTriple<f64> {
    let t = params.t_pre as f64;
    let noise = (t + 1.0) / t * params.sigma_e2;
    let classic = noise
        + (d.delta_theta.transpose() * &params.sigma_theta_theta * &d.delta_theta)[(0, 0)]
        + (d.delta_x_coeff.transpose() * &params.sigma_xx * &d.delta_x_coeff)[(0, 0)]
        + 2.0 * (d.delta_theta.transpose() * &params.sigma_theta_x * &d.delta_x_coeff)[(0, 0)];
    let matched_x =
        noise + (d.delta_theta.transpose() * &d.sigma_tilde * &d.delta_theta)[(0, 0)];
    let q = params.q();
    let beta_post = &params.beta_theta[params.t_pre];
    let i_minus_r = DMatrix::identity(q, q) - &d.r_matrix;
    let matched_xy = (beta_post.transpose() * &i_minus_r * &d.sigma_tilde * beta_post)[(0, 0)]
        + params.sigma_e2;
    EstimatorTriple {
        classic,
        matched_x,
        matched_xy,
    }
}

/// Full variances of the generalized estimators at the given group sizes.
pub fn variance_generalized(
    params: &DgpParams,
    n1: usize,
    n0: usize,
) -> Result<EstimatorTriple<VarianceParts>> {
    check_sizes(n1, n0)?;
    let core = variance_core_generalized(params)?;
    Ok(EstimatorTriple::from_fn(|kind| {
        let c = core.get(kind);
        let factor = sample_factor(kind, n1, n0, n1);
        VarianceParts {
            core: c,
            factor,
            full: c * factor,
        }
    }))
}

/// Asymptotic biases of the three generalized estimators.
pub fn bias_generalized(params: &DgpParams) -> Result<EstimatorTriple<f64>> {
    let d = derive_structure(params)?;
    Ok(bias_from_structure(params, &d))
}

fn bias_from_structure(params: &DgpParams, d: &DerivedStructure) -> EstimatorTriple<f64> {
    let matched_x = d.delta_theta.dot(&d.delta_tilde);
    // (Sigma_XX^{-1} Sigma_Xtheta Delta_theta + Delta_X)' delta_x.
    // Reuse the identity Delta' Sigma_thetaX Sigma_XX^{-1} delta_x =
    // Delta' (delta_theta_groups - delta_tilde).
    let cross = d.delta_theta.dot(&(&d.delta_theta_groups - &d.delta_tilde));
    let classic = matched_x + cross + d.delta_x_coeff.dot(&d.delta_x_groups);
    let q = params.q();
    let beta_post = &params.beta_theta[params.t_pre];
    let i_minus_r = DMatrix::identity(q, q) - &d.r_matrix;
    let matched_xy = (beta_post.transpose() * &i_minus_r * &d.delta_tilde)[(0, 0)];
    EstimatorTriple {
        classic,
        matched_x,
        matched_xy,
    }
}

/// Bias, variance and MSE per estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMoments {
    pub bias: f64,
    pub var_core: f64,
    pub var_full: f64,
    pub mse: f64,
}

/// Every closed-form population quantity the guideline consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentsReport {
    pub per_estimator: EstimatorTriple<EstimatorMoments>,
    /// Scalar reliability, present for univariate latents.
    pub reliability_scalar: Option<f64>,
    pub n1: usize,
    pub n0: usize,
    pub warnings: Vec<String>,
}

/// MSE = bias^2 + full variance, per estimator.
pub fn mse_generalized(params: &DgpParams, n1: usize, n0: usize) -> Result<MomentsReport> {
    check_sizes(n1, n0)?;
    let d = derive_structure(params)?;
    let bias = bias_from_structure(params, &d);
    let core = variance_core_from_structure(params, &d);
    let per_estimator = EstimatorTriple::from_fn(|kind| {
        let b = bias.get(kind);
        let c = core.get(kind);
        let full = c * sample_factor(kind, n1, n0, n1);
        EstimatorMoments {
            bias: b,
            var_core: c,
            var_full: full,
            mse: b * b + full,
        }
    });
    let reliability_scalar = if params.q() == 1 {
        Some(reliability_scalar(params)?)
    } else {
        None
    };
    Ok(MomentsReport {
        per_estimator,
        reliability_scalar,
        n1,
        n0,
        warnings: d.warnings,
    })
}

/// Canonical reliability of the pre-treatment outcome for theta after
/// controlling for X (T = 1, q = p = 1).
pub fn canonical_reliability(c: &CanonicalParams) -> f64 {
    let signal = c.beta_theta[0] * c.beta_theta[0]
        * c.sigma_theta
        * c.sigma_theta
        * (1.0 - c.rho * c.rho);
    signal / (signal + c.sigma_e2)
}

/// Closed-form variances of the three estimators in the univariate
/// two-period setting. Errors on |rho| = 1, where the conditional law
/// behind the matched variances degenerates.
pub fn variance_canonical(
    c: &CanonicalParams,
    n1: usize,
    n0: usize,
) -> Result<(f64, f64, f64)> {
    c.validate()?;
    check_sizes(n1, n0)?;
    if c.rho.abs() >= 1.0 {
        return Err(Error::InvalidParams(format!(
            "degenerate correlation: |rho| = {}",
            c.rho.abs()
        )));
    }
    let st2 = c.sigma_theta * c.sigma_theta;
    let sx2 = c.sigma_x * c.sigma_x;
    let dth = c.delta_theta();
    let dx = c.delta_x();
    let f_did = 1.0 / n1 as f64 + 1.0 / n0 as f64;
    let f_matched = 2.0 / n1 as f64;
    let v_did = f_did
        * (2.0 * c.sigma_e2
            + dth * dth * st2
            + dx * dx * sx2
            + 2.0 * dth * dx * c.rho * c.sigma_x * c.sigma_theta);
    let v_didx = f_matched * (2.0 * c.sigma_e2 + dth * dth * (1.0 - c.rho * c.rho) * st2);
    let r = canonical_reliability(c);
    let v_didxy = f_matched
        * (c.sigma_e2
            + c.beta_theta[1] * c.beta_theta[1] * st2 * (1.0 - c.rho * c.rho) * (1.0 - r));
    Ok((v_did, v_didx, v_didxy))
}

/// Scalar reliability for univariate latents over T pre-periods
/// (signal = sum of squared pre-period latent slopes times the
/// residualized latent variance).
pub fn reliability_scalar(params: &DgpParams) -> Result<f64> {
    if params.q() != 1 {
        return Err(Error::Config(format!(
            "scalar reliability undefined for q = {}",
            params.q()
        )));
    }
    let d = derive_structure(params)?;
    let sigma_tilde = d.sigma_tilde[(0, 0)];
    let signal: f64 = (0..params.t_pre)
        .map(|s| params.beta_theta[s][0] * params.beta_theta[s][0])
        .sum::<f64>()
        * sigma_tilde;
    let denom = signal + params.sigma_e2;
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok(signal / denom)
}

/// Spectral distance of the reliability matrix from the identity for one
/// member of a family indexed by T.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityDistance {
    pub t_pre: usize,
    /// None when the structure could not be evaluated (singularity).
    pub distance: Option<f64>,
    pub flag: Option<String>,
}

/// Evaluates || r(T) - I ||_2 across a family of parameterizations
/// indexed by the number of pre-periods. Singularities are reported per
/// entry, not fatal.
pub fn reliability_convergence_check(
    family: impl Fn(usize) -> DgpParams,
    t_values: &[usize],
) -> Vec<ReliabilityDistance> {
    t_values
        .iter()
        .map(|&t| {
            let params = family(t);
            match derive_structure(&params) {
                Err(e) => ReliabilityDistance {
                    t_pre: t,
                    distance: None,
                    flag: Some(format!("evaluation failed: {e}")),
                },
                Ok(d) => {
                    let q = params.q();
                    let dist =
                        spectral_norm(&(&d.r_matrix - DMatrix::<f64>::identity(q, q)));
                    // The convergence statement needs the averaged slope
                    // outer product to stay positive definite.
                    let gram = d.b_theta.transpose() * &d.b_theta / params.t_pre as f64;
                    let min_eig = gram
                        .symmetric_eigen()
                        .eigenvalues
                        .iter()
                        .cloned()
                        .fold(f64::MAX, f64::min);
                    let flag = if min_eig <= 1e-12 {
                        Some("assumption violated: averaged latent signal is degenerate".into())
                    } else {
                        None
                    };
                    ReliabilityDistance {
                        t_pre: t,
                        distance: Some(dist),
                        flag,
                    }
                }
            }
        })
        .collect()
}

/// Both sides of the match-on-covariates variance condition, plus the
/// verdict. The boolean coincides with v_did >= v_didx.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub match_x_better: bool,
    pub lhs: f64,
    pub rhs: f64,
}

/// Sufficient-and-necessary condition for matching on covariates to
/// reduce variance: the covariate-variation benefit (left side) must
/// outweigh the sample-size cost (right side).
pub fn variance_tradeoff_conditions(
    c: &CanonicalParams,
    n1: usize,
    n0: usize,
) -> Result<TradeoffReport> {
    c.validate()?;
    check_sizes(n1, n0)?;
    let st = c.sigma_theta;
    let sx = c.sigma_x;
    let dth = c.delta_theta();
    let dx = c.delta_x();
    let inv1 = 1.0 / n1 as f64;
    let inv0 = 1.0 / n0 as f64;
    let lhs = (dx * dx * sx * sx + 2.0 * dth * dx * c.rho * st * sx) * (inv0 + inv1);
    let rhs = dth * dth * st * st * ((1.0 - 2.0 * c.rho * c.rho) * inv1 - inv0)
        + 2.0 * c.sigma_e2 * (inv1 - inv0);
    Ok(TradeoffReport {
        match_x_better: lhs >= rhs,
        lhs,
        rhs,
    })
}
