//! Plug-in estimation of bias, core variance, MSE and the scalar
//! reliability from observed panel data alone: residualize the covariate
//! effect out of every period's outcome with control-group regressions,
//! then read the latent channel off the residualized moments.
//!
//! All second moments are pooled within treatment group with an n-1
//! denominator, so group mean separation never contaminates them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{sample_factor, EstimatorMoments, EstimatorTriple};
use crate::panel::PanelData;
use crate::stats;

/// Outcomes with the estimated covariate effect removed.
///
/// The per-period coefficients are fitted on control units only; the
/// residualization is applied to every unit. Intercepts stay inside the
/// residualized outcome (they cancel in every downstream contrast).
#[derive(Debug, Clone)]
pub struct ResidualizedPanel {
    /// n x (T+1).
    pub y_tilde: DMatrix<f64>,
    /// Per-period fitted covariate coefficients; zero entries for
    /// excluded (zero-variance) columns.
    pub beta_x_hat: Vec<DVector<f64>>,
    /// Per-period control-group R-squared of the residualizing fit.
    pub r_squared: Vec<f64>,
    pub n_control: usize,
    /// Covariate columns excluded for having no variation in the control
    /// group (their coefficient is fixed at zero).
    pub dropped_columns: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Per-period control-group least squares of Y on X (with intercept),
/// then `y_tilde = y - beta_x_hat' x` for all units.
pub fn residualize(panel: &PanelData) -> Result<ResidualizedPanel> {
    let p = panel.n_covariates();
    let controls = panel.control_indices();
    let n_control = controls.len();
    if n_control < p + 2 {
        return Err(Error::InvalidData(format!(
            "residualization needs at least p + 2 = {} control units, found {n_control}",
            p + 2
        )));
    }
    let mut warnings = Vec::new();

    // Columns with no variation among controls carry no signal for the
    // fit; exclude them and pin their coefficient at zero (any constant
    // level is absorbed by the intercept).
    let mut active = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..p {
        let col: Vec<f64> = controls
            .iter()
            .map(|&i| panel.covariates()[(i, j)])
            .collect();
        if stats::sample_variance(&col) > 0.0 {
            active.push(j);
        } else {
            dropped.push(j);
        }
    }
    if !dropped.is_empty() {
        warnings.push(format!(
            "covariate column(s) {} have no control-group variation; coefficient fixed at 0",
            dropped
                .iter()
                .map(|j| format!("x{}", j + 1))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }

    let k = active.len() + 1;
    let mut design = DMatrix::zeros(n_control, k);
    for (r, &i) in controls.iter().enumerate() {
        design[(r, 0)] = 1.0;
        for (c, &j) in active.iter().enumerate() {
            design[(r, c + 1)] = panel.covariates()[(i, j)];
        }
    }
    let xtx = design.transpose() * &design;
    if !full_rank(&xtx) {
        let suspects = collinear_suspects(&design, &active);
        return Err(Error::InvalidData(format!(
            "covariate design is rank deficient; collinear column(s): {suspects}"
        )));
    }
    let chol = xtx.clone().cholesky().ok_or_else(|| {
        Error::Numerical("covariate normal equations could not be factored".into())
    })?;

    let t_periods = panel.n_periods();
    let mut beta_x_hat = Vec::with_capacity(t_periods);
    let mut r_squared = Vec::with_capacity(t_periods);
    let mut y_tilde = DMatrix::zeros(panel.n(), t_periods);
    for t in 0..t_periods {
        let yv = DVector::from_fn(n_control, |r, _| panel.outcome(controls[r], t));
        let coef = chol.solve(&(design.transpose() * &yv));
        let fitted = &design * &coef;
        let resid = &yv - fitted;
        let rss: f64 = resid.iter().map(|e| e * e).sum();
        let ybar = yv.iter().sum::<f64>() / n_control as f64;
        let tss: f64 = yv.iter().map(|v| (v - ybar) * (v - ybar)).sum();
        r_squared.push(if tss > 0.0 { 1.0 - rss / tss } else { 0.0 });

        let mut full = DVector::zeros(p);
        for (c, &j) in active.iter().enumerate() {
            full[j] = coef[c + 1];
        }
        for i in 0..panel.n() {
            let mut v = panel.outcome(i, t);
            for &j in &active {
                v -= full[j] * panel.covariates()[(i, j)];
            }
            y_tilde[(i, t)] = v;
        }
        beta_x_hat.push(full);
    }
    Ok(ResidualizedPanel {
        y_tilde,
        beta_x_hat,
        r_squared,
        n_control,
        dropped_columns: dropped,
        warnings,
    })
}

/// Numerical full-rank test on a Gram matrix: the smallest eigenvalue
/// must clear a relative floor, not merely stay positive, so exact
/// collinearity is caught through roundoff.
fn full_rank(gram: &DMatrix<f64>) -> bool {
    let eig = gram.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let lam_min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    lam_min > 1e-10 * lam_max.max(f64::MIN_POSITIVE)
}

/// Names the columns whose removal restores full rank, for the
/// rank-deficiency error message.
fn collinear_suspects(design: &DMatrix<f64>, active: &[usize]) -> String {
    let k = design.ncols();
    let mut suspects = Vec::new();
    for drop in 1..k {
        let keep: Vec<usize> = (0..k).filter(|&c| c != drop).collect();
        let reduced = design.select_columns(keep.iter());
        if full_rank(&(reduced.transpose() * reduced)) {
            suspects.push(format!("x{}", active[drop - 1] + 1));
        }
    }
    if suspects.is_empty() {
        "(could not isolate a single column)".to_string()
    } else {
        suspects.join(", ")
    }
}

/// Plug-in moments per estimator, from observables alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PluginReport {
    pub per_estimator: EstimatorTriple<EstimatorMoments>,
    /// Scalar reliability under the univariate-latent working model;
    /// present when T >= 2 (estimated on the default pre-period pair).
    pub reliability_hat: Option<f64>,
    /// Treated-minus-control covariate mean gap.
    pub delta_x_hat: Vec<f64>,
    pub n1: usize,
    pub n0: usize,
    pub warnings: Vec<String>,
}

struct PluginCtx<'a> {
    panel: &'a PanelData,
    resid: &'a ResidualizedPanel,
    groups: Vec<bool>,
}

impl<'a> PluginCtx<'a> {
    fn new(panel: &'a PanelData, resid: &'a ResidualizedPanel) -> Self {
        PluginCtx {
            panel,
            resid,
            groups: panel.treatment_flags().to_vec(),
        }
    }

    /// Residualized post-minus-pre-average contrast per unit.
    fn diff_contrasts(&self) -> Vec<f64> {
        let t = self.panel.t_pre();
        (0..self.panel.n())
            .map(|i| {
                let pre: f64 = (0..t).map(|s| self.resid.y_tilde[(i, s)]).sum();
                self.resid.y_tilde[(i, t)] - pre / t as f64
            })
            .collect()
    }

    fn post_column(&self) -> Vec<f64> {
        let t = self.panel.t_pre();
        (0..self.panel.n())
            .map(|i| self.resid.y_tilde[(i, t)])
            .collect()
    }

    fn beta_gap(&self) -> DVector<f64> {
        let t = self.panel.t_pre();
        let mut pre = DVector::zeros(self.panel.n_covariates());
        for s in 0..t {
            pre += &self.resid.beta_x_hat[s];
        }
        &self.resid.beta_x_hat[t] - pre / t as f64
    }

    fn delta_x_hat(&self) -> Result<DVector<f64>> {
        let p = self.panel.n_covariates();
        let mut out = DVector::zeros(p);
        for j in 0..p {
            let col: Vec<f64> = (0..self.panel.n())
                .map(|i| self.panel.covariates()[(i, j)])
                .collect();
            out[j] = stats::group_mean_contrast(&col, &self.groups)?;
        }
        Ok(out)
    }

    /// Pooled within-group second moments of the stacked residualized
    /// outcomes. Returns (cov_post_pre (T), var_pre (T x T)).
    fn pre_post_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let t = self.panel.t_pre();
        let cov = stats::pooled_group_covariance(&self.resid.y_tilde, &self.groups)?;
        let var_pre = cov.view((0, 0), (t, t)).into_owned();
        let cov_post_pre = DVector::from_fn(t, |s, _| cov[(t, s)]);
        Ok((cov_post_pre, var_pre))
    }
}

/// Bias estimators for the three strategies.
pub fn estimate_bias(panel: &PanelData) -> Result<EstimatorTriple<f64>> {
    let resid = residualize(panel)?;
    let mut warnings = Vec::new();
    bias_from_residualized(panel, &resid, &mut warnings)
}

fn bias_from_residualized(
    panel: &PanelData,
    resid: &ResidualizedPanel,
    warnings: &mut Vec<String>,
) -> Result<EstimatorTriple<f64>> {
    let ctx = PluginCtx::new(panel, resid);
    let d = ctx.diff_contrasts();
    let contrast_d = stats::group_mean_contrast(&d, &ctx.groups)?;
    let correction = ctx.beta_gap().dot(&ctx.delta_x_hat()?);

    let post = ctx.post_column();
    let contrast_post = stats::group_mean_contrast(&post, &ctx.groups)?;
    let t = panel.t_pre();
    let mut contrast_pre = DVector::zeros(t);
    for s in 0..t {
        let col: Vec<f64> = (0..panel.n()).map(|i| resid.y_tilde[(i, s)]).collect();
        contrast_pre[s] = stats::group_mean_contrast(&col, &ctx.groups)?;
    }
    let (cov_post_pre, var_pre) = ctx.pre_post_moments()?;
    let solved = stats::spd_solve(
        &var_pre,
        &DMatrix::from_column_slice(t, 1, contrast_pre.as_slice()),
        "residualized pre-outcome covariance",
        warnings,
    )?;
    let matched_xy = contrast_post - cov_post_pre.dot(&solved.column(0).into_owned());

    Ok(EstimatorTriple {
        classic: contrast_d + correction,
        matched_x: contrast_d,
        matched_xy,
    })
}

/// Core-variance estimators (bracketed factors) for the three strategies.
pub fn estimate_variance_core(panel: &PanelData) -> Result<EstimatorTriple<f64>> {
    let resid = residualize(panel)?;
    let mut warnings = Vec::new();
    variance_core_from_residualized(panel, &resid, &mut warnings)
}

/// Variance estimators with the sample-size coefficients applied.
pub fn estimate_variance(
    panel: &PanelData,
) -> Result<EstimatorTriple<crate::oracle::VarianceParts>> {
    let core = estimate_variance_core(panel)?;
    let n1 = panel.n_treated();
    let n0 = panel.n_control();
    Ok(EstimatorTriple::from_fn(|kind| {
        let c = core.get(kind);
        let factor = sample_factor(kind, n1, n0, n1);
        crate::oracle::VarianceParts {
            core: c,
            factor,
            full: c * factor,
        }
    }))
}

fn variance_core_from_residualized(
    panel: &PanelData,
    resid: &ResidualizedPanel,
    warnings: &mut Vec<String>,
) -> Result<EstimatorTriple<f64>> {
    let ctx = PluginCtx::new(panel, resid);
    let d = ctx.diff_contrasts();
    let var_d = stats::pooled_group_variance(&d, &ctx.groups)?;

    let beta_gap = ctx.beta_gap();
    let sigma_xx_hat = stats::pooled_group_covariance(panel.covariates(), &ctx.groups)?;
    let quad = (beta_gap.transpose() * &sigma_xx_hat * &beta_gap)[(0, 0)];

    let post = ctx.post_column();
    let var_post = stats::pooled_group_variance(&post, &ctx.groups)?;
    let (cov_post_pre, var_pre) = ctx.pre_post_moments()?;
    let t = panel.t_pre();
    let solved = stats::spd_solve(
        &var_pre,
        &DMatrix::from_column_slice(t, 1, cov_post_pre.as_slice()),
        "residualized pre-outcome covariance",
        warnings,
    )?;
    let matched_xy = var_post - cov_post_pre.dot(&solved.column(0).into_owned());

    Ok(EstimatorTriple {
        classic: var_d + quad,
        matched_x: var_d,
        matched_xy,
    })
}

/// Full plug-in report: bias, core and full variance, MSE per estimator,
/// plus the covariate imbalance and (when T >= 2) the scalar reliability.
pub fn estimate_moments(panel: &PanelData) -> Result<PluginReport> {
    let resid = residualize(panel)?;
    let mut warnings = resid.warnings.clone();
    let bias = bias_from_residualized(panel, &resid, &mut warnings)?;
    let core = variance_core_from_residualized(panel, &resid, &mut warnings)?;
    let n1 = panel.n_treated();
    let n0 = panel.n_control();
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
    let reliability_hat = if panel.t_pre() >= 2 {
        match reliability_from_residualized(panel, &resid, 0, 1) {
            Ok(est) => {
                warnings.extend(est.warnings);
                Some(est.value)
            }
            Err(e) => {
                warnings.push(format!("reliability estimation failed: {e}"));
                None
            }
        }
    } else {
        None
    };
    let ctx = PluginCtx::new(panel, &resid);
    let delta_x_hat = ctx.delta_x_hat()?.iter().copied().collect();
    Ok(PluginReport {
        per_estimator,
        reliability_hat,
        delta_x_hat,
        n1,
        n0,
        warnings,
    })
}

/// Scalar reliability estimate under the univariate-latent working model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityEstimate {
    pub value: f64,
    pub sigma_e2_hat: f64,
    /// Pre-periods whose signal variance was clipped at zero.
    pub clipped_periods: Vec<usize>,
    /// The stable pre-period pair used for the noise estimate.
    pub stable_pair: (usize, usize),
    pub warnings: Vec<String>,
}

/// Estimates the scalar reliability from two presumed-stable pre-periods
/// (t_a, t_b): half the variance of their residualized difference
/// estimates the noise, and per-period signal variances follow by
/// subtraction (clipped at zero).
pub fn estimate_reliability(
    panel: &PanelData,
    t_a: usize,
    t_b: usize,
) -> Result<ReliabilityEstimate> {
    let resid = residualize(panel)?;
    reliability_from_residualized(panel, &resid, t_a, t_b)
}

fn reliability_from_residualized(
    panel: &PanelData,
    resid: &ResidualizedPanel,
    t_a: usize,
    t_b: usize,
) -> Result<ReliabilityEstimate> {
    let t = panel.t_pre();
    if t < 2 {
        return Err(Error::InvalidData(format!(
            "reliability estimation needs at least 2 pre-periods, found {t}"
        )));
    }
    if t_a >= t || t_b >= t || t_a == t_b {
        return Err(Error::Config(format!(
            "stable pre-period pair ({t_a}, {t_b}) must be two distinct periods below {t}"
        )));
    }
    let groups = panel.treatment_flags().to_vec();
    let diffs: Vec<f64> = (0..panel.n())
        .map(|i| resid.y_tilde[(i, t_a)] - resid.y_tilde[(i, t_b)])
        .collect();
    let sigma_e2_hat = 0.5 * stats::pooled_group_variance(&diffs, &groups)?;

    let mut warnings = Vec::new();
    let mut clipped = Vec::new();
    let mut signal_sum = 0.0;
    for s in 0..t {
        let col: Vec<f64> = (0..panel.n()).map(|i| resid.y_tilde[(i, s)]).collect();
        let var_s = stats::pooled_group_variance(&col, &groups)?;
        let signal = var_s - sigma_e2_hat;
        if signal > 0.0 {
            signal_sum += signal;
        } else {
            clipped.push(s);
        }
    }
    if clipped.len() == t {
        warnings.push("reliability clipped at 0: no pre-period shows signal above noise".into());
    } else if !clipped.is_empty() {
        warnings.push(format!(
            "signal variance clipped at 0 for pre-period(s) {clipped:?}"
        ));
    }
    let denom = signal_sum + sigma_e2_hat;
    let value = if denom > 0.0 { signal_sum / denom } else { 0.0 };
    Ok(ReliabilityEstimate {
        value,
        sigma_e2_hat,
        clipped_periods: clipped,
        stable_pair: (t_a, t_b),
        warnings,
    })
}

/// Subtracts the estimated bias from a point estimate.
pub fn bias_correct(tau_hat: f64, bias_hat: f64) -> f64 {
    tau_hat - bias_hat
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, CanonicalParams, LatentLaw};

    fn canonical_dgp() -> CanonicalParams {
        CanonicalParams {
            beta0: [0.2, -0.4],
            beta_theta: [1.0, 1.5],
            beta_x: [1.0, 1.3],
            mu_theta: [0.0, 1.0],
            mu_x: [0.0, 0.5],
            sigma_theta: 1.0,
            sigma_x: 1.0,
            rho: 0.0,
            sigma_e2: 1.0,
            tau: 1.0,
        }
    }

    #[test]
    fn noiseless_known_slope_recovered_exactly() {
        // Y_t = 2 x + t, no noise, no latent: beta_hat = 2 exactly and the
        // residualized outcomes are constant within period.
        let n = 20;
        let mut y = DMatrix::zeros(n, 2);
        let mut x = DMatrix::zeros(n, 1);
        let mut z = vec![false; n];
        for i in 0..n {
            let xv = i as f64 * 0.37 - 3.0;
            x[(i, 0)] = xv;
            y[(i, 0)] = 2.0 * xv;
            y[(i, 1)] = 2.0 * xv + 1.0;
            z[i] = i < 4;
        }
        let panel =
            PanelData::new((0..n).map(|i| format!("u{i}")).collect(), z, y, x, 1, None).unwrap();
        let resid = residualize(&panel).unwrap();
        assert!((resid.beta_x_hat[0][0] - 2.0).abs() < 1e-12);
        assert!((resid.beta_x_hat[1][0] - 2.0).abs() < 1e-12);
        assert!((resid.r_squared[0] - 1.0).abs() < 1e-12);
        for i in 1..n {
            assert!((resid.y_tilde[(i, 0)] - resid.y_tilde[(0, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_variance_column_excluded() {
        let n = 12;
        let mut y = DMatrix::zeros(n, 2);
        let mut x = DMatrix::zeros(n, 2);
        let mut z = vec![false; n];
        for i in 0..n {
            x[(i, 0)] = i as f64;
            x[(i, 1)] = 0.0; // all zeros
            y[(i, 0)] = 0.5 * i as f64;
            y[(i, 1)] = 0.5 * i as f64 + 2.0;
            z[i] = i < 3;
        }
        let panel =
            PanelData::new((0..n).map(|i| format!("u{i}")).collect(), z, y, x, 1, None).unwrap();
        let resid = residualize(&panel).unwrap();
        assert_eq!(resid.dropped_columns, vec![1]);
        assert_eq!(resid.beta_x_hat[0][1], 0.0);
        assert!(!resid.warnings.is_empty());
    }

    #[test]
    fn duplicated_column_names_collinear_suspects() {
        let n = 12;
        let mut y = DMatrix::zeros(n, 2);
        let mut x = DMatrix::zeros(n, 2);
        let mut z = vec![false; n];
        for i in 0..n {
            x[(i, 0)] = i as f64;
            x[(i, 1)] = 2.0 * i as f64; // collinear with x1
            y[(i, 0)] = 0.5 * i as f64;
            y[(i, 1)] = 0.5 * i as f64 + 2.0;
            z[i] = i < 3;
        }
        let panel =
            PanelData::new((0..n).map(|i| format!("u{i}")).collect(), z, y, x, 1, None).unwrap();
        let err = residualize(&panel).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rank deficient"), "{msg}");
        assert!(msg.contains("x1") || msg.contains("x2"), "{msg}");
    }

    #[test]
    fn residualizing_coefficients_absorb_the_latent_channel() {
        // With correlated traits, the control-group regression of Y_t on
        // X converges to beta_x_t plus the latent pass-through.
        let mut c = canonical_dgp();
        c.rho = 0.5;
        c.sigma_theta = 1.2;
        c.sigma_x = 0.9;
        let params = c.to_dgp(100_000, 0.3, LatentLaw::Gaussian);
        let panel = simulate(&params, 77).unwrap();
        let resid = residualize(&panel).unwrap();
        let pass_through = c.rho * c.sigma_theta * c.sigma_x / (c.sigma_x * c.sigma_x);
        for t in 0..2 {
            let limit = c.beta_x[t] + pass_through * c.beta_theta[t];
            let got = resid.beta_x_hat[t][0];
            assert!(
                (got - limit).abs() / limit.abs() < 0.02,
                "period {t}: beta_hat {got} vs limit {limit}"
            );
        }
    }

    #[test]
    fn balanced_groups_with_identical_trends_report_zero_bias() {
        // Control rows duplicate the treated rows exactly: every group
        // contrast (and the covariate gap) is identically zero.
        let rows: [(f64, f64, f64); 3] = [(1.0, 2.5, 0.3), (0.0, 1.0, -0.8), (2.0, 2.0, 1.1)];
        let n = 6;
        let mut y = DMatrix::zeros(n, 2);
        let mut x = DMatrix::zeros(n, 1);
        let mut z = vec![false; n];
        for i in 0..n {
            let (y0, y1, xv) = rows[i % 3];
            y[(i, 0)] = y0;
            y[(i, 1)] = y1;
            x[(i, 0)] = xv;
            z[i] = i < 3;
        }
        let panel =
            PanelData::new((0..n).map(|i| format!("u{i}")).collect(), z, y, x, 1, None).unwrap();
        let bias = estimate_bias(&panel).unwrap();
        assert!(bias.classic.abs() < 1e-12);
        assert!(bias.matched_x.abs() < 1e-12);
        assert!(bias.matched_xy.abs() < 1e-12);
    }

    #[test]
    fn noiseless_post_variance_vanishes_after_projection() {
        // Outcomes are exact functions of x with a microscopic wiggle:
        // projecting the post period on the pre periods leaves nothing.
        let n = 16;
        let mut y = DMatrix::zeros(n, 2);
        let mut x = DMatrix::zeros(n, 1);
        let mut z = vec![false; n];
        for i in 0..n {
            let xv = i as f64 * 0.5;
            let w = 1e-9 * ((i * 3 % 7) as f64 - 3.0);
            x[(i, 0)] = xv;
            y[(i, 0)] = 1.5 * xv + w;
            y[(i, 1)] = 0.7 * xv + 2.0 + w;
            z[i] = i < 5;
        }
        let panel =
            PanelData::new((0..n).map(|i| format!("u{i}")).collect(), z, y, x, 1, None).unwrap();
        let core = estimate_variance_core(&panel).unwrap();
        assert!(core.matched_xy.abs() < 1e-12, "core {}", core.matched_xy);
    }

    #[test]
    fn bias_correct_examples() {
        assert!((bias_correct(0.102, 0.02404) - 0.07796).abs() < 1e-12);
        assert_eq!(format!("{:.3}", bias_correct(0.102, 0.02404)), "0.078");
        assert_eq!(bias_correct(1.5, 0.0), 1.5);
        assert!((bias_correct(1.5, 0.65) - 0.85).abs() < 1e-12);
    }

    #[test]
    fn translation_invariance_of_plugin_moments() {
        let params = canonical_dgp().to_dgp(600, 0.4, LatentLaw::Gaussian);
        let panel = simulate(&params, 3).unwrap();
        let base = estimate_moments(&panel).unwrap();

        // Shift every period by its own constant.
        let mut y = panel.outcomes().clone();
        for i in 0..panel.n() {
            y[(i, 0)] += 5.0;
            y[(i, 1)] -= 11.0;
        }
        let shifted = PanelData::new(
            panel.unit_ids().to_vec(),
            panel.treatment_flags().to_vec(),
            y,
            panel.covariates().clone(),
            panel.t_pre(),
            None,
        )
        .unwrap();
        let moved = estimate_moments(&shifted).unwrap();
        for (a, b) in base
            .per_estimator
            .as_array()
            .iter()
            .zip(moved.per_estimator.as_array())
        {
            assert!((a.bias - b.bias).abs() < 1e-9);
            assert!((a.var_core - b.var_core).abs() < 1e-9);
        }
    }

    #[test]
    fn mse_recomposition_is_exact() {
        let params = canonical_dgp().to_dgp(500, 0.4, LatentLaw::Gaussian);
        let panel = simulate(&params, 9).unwrap();
        let report = estimate_moments(&panel).unwrap();
        for m in report.per_estimator.as_array() {
            assert_eq!(m.mse, m.bias * m.bias + m.var_full);
        }
    }

    #[test]
    fn unmatched_bias_contrast_collapses_to_the_point_estimate() {
        // Algebraic identity of the displayed formulas: the residualized
        // group contrast plus the covariate correction reassembles the
        // raw differencing estimator, term for term.
        let params = canonical_dgp().to_dgp(800, 0.4, LatentLaw::Gaussian);
        let panel = simulate(&params, 12).unwrap();
        let bias = estimate_bias(&panel).unwrap();
        let tau_hat = crate::estimators::estimate_classic(&panel).unwrap().tau_hat;
        assert!((bias.classic - tau_hat).abs() < 1e-10);
    }

    #[test]
    fn bias_contrasts_shift_with_the_post_period_effect() {
        // The treated post-period outcome carries the treatment effect,
        // and the displayed bias contrasts inherit it one-for-one.
        // Calibration DGPs for bias consistency therefore set tau = 0.
        let mut c = canonical_dgp();
        c.mu_theta = [0.0, 0.0];
        c.mu_x = [0.0, 0.0];
        c.tau = 0.0;
        let base = estimate_bias(&simulate(&c.to_dgp(50_000, 0.4, LatentLaw::Gaussian), 4).unwrap())
            .unwrap();
        c.tau = 2.0;
        let shifted =
            estimate_bias(&simulate(&c.to_dgp(50_000, 0.4, LatentLaw::Gaussian), 4).unwrap())
                .unwrap();
        for (a, b) in base.as_array().iter().zip(shifted.as_array()) {
            assert!(((b - a) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reliability_needs_two_pre_periods() {
        let params = canonical_dgp().to_dgp(200, 0.4, LatentLaw::Gaussian);
        let panel = simulate(&params, 1).unwrap();
        assert!(estimate_reliability(&panel, 0, 1).is_err());
    }

    #[test]
    fn anticorrelated_noise_panel_clips_reliability_to_zero() {
        // Pre-period outcomes are mirrored patterns: every per-period
        // variance sits below the implied noise estimate, so all signal
        // estimates clip and the reliability is exactly zero.
        let n = 12;
        let mut y = DMatrix::zeros(n, 3);
        let mut z = vec![false; n];
        for i in 0..n {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            y[(i, 0)] = s;
            y[(i, 1)] = -s;
            y[(i, 2)] = 0.3 * s;
            z[i] = i < 4;
        }
        let panel = PanelData::new(
            (0..n).map(|i| format!("u{i}")).collect(),
            z,
            y,
            DMatrix::zeros(n, 0),
            2,
            None,
        )
        .unwrap();
        let est = estimate_reliability(&panel, 0, 1).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.clipped_periods.len(), 2);
        assert!(est.warnings.iter().any(|w| w.contains("clipped at 0")));
    }
}
