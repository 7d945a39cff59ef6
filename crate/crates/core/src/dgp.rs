//! Synthetic balanced panels from the linear structural equation model.
//!
//! Outcomes follow `Y_{i,t} = beta0_t + beta_theta_t' theta_i +
//! beta_x_t' X_i + eps_{i,t} + tau * 1{t = T, Z_i = 1}` with
//! time-invariant unit traits `(theta_i, X_i)` drawn i.i.d. within
//! treatment group around group-specific means and shared covariance
//! blocks, and homoscedastic serially-uncorrelated noise.
//!
//! Everything is driven by the ChaCha8 counter-based generator so a seed
//! reproduces bit-identically across platforms. Replicate r of a Monte
//! Carlo run uses the derived stream (seed, r).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, estimate_classic, EstimatorKind};
use crate::matching::{match_panel, MatchAssignment, MatchFeatures, MatchMethod, MatchSpec};
use crate::panel::PanelData;
use crate::stats::mean_and_variance;

const SQRT_3: f64 = 1.7320508075688772;

/// Distribution family for unit traits and noise. Only the first two
/// moments are pinned; non-Gaussian families are affine transforms of a
/// standardized draw, which keeps fourth moments finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentLaw {
    Gaussian,
    ShiftedUniform,
    TwoPoint,
}

impl LatentLaw {
    /// Mean-zero unit-variance draw from the family.
    fn draw_std<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            LatentLaw::Gaussian => rng.sample(StandardNormal),
            LatentLaw::ShiftedUniform => rng.gen::<f64>() * (2.0 * SQRT_3) - SQRT_3,
            LatentLaw::TwoPoint => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Full parameterization of the structural model.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpParams {
    pub n_units: usize,
    /// Treatment probability, in (0, 0.5].
    pub p_treated: f64,
    /// Number of pre-treatment periods T; the single post period is index T.
    pub t_pre: usize,
    /// Intercepts per period, length T+1.
    pub beta0: Vec<f64>,
    /// Latent slopes per period, length T+1, each of dimension q.
    pub beta_theta: Vec<DVector<f64>>,
    /// Covariate slopes per period, length T+1, each of dimension p.
    pub beta_x: Vec<DVector<f64>>,
    /// Group means of theta, indexed by z.
    pub mu_theta: [DVector<f64>; 2],
    /// Group means of X, indexed by z.
    pub mu_x: [DVector<f64>; 2],
    pub sigma_theta_theta: DMatrix<f64>,
    pub sigma_xx: DMatrix<f64>,
    /// q x p cross-covariance.
    pub sigma_theta_x: DMatrix<f64>,
    pub sigma_e2: f64,
    /// True homogeneous treatment effect on the treated.
    pub tau: f64,
    pub latent_law: LatentLaw,
}

impl DgpParams {
    pub fn q(&self) -> usize {
        self.sigma_theta_theta.nrows()
    }

    pub fn p(&self) -> usize {
        self.sigma_xx.nrows()
    }

    /// Stacked trait covariance [[S_tt, S_tx], [S_xt, S_xx]].
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let q = self.q();
        let p = self.p();
        let mut j = DMatrix::zeros(q + p, q + p);
        j.view_mut((0, 0), (q, q)).copy_from(&self.sigma_theta_theta);
        j.view_mut((0, q), (q, p)).copy_from(&self.sigma_theta_x);
        j.view_mut((q, 0), (p, q))
            .copy_from(&self.sigma_theta_x.transpose());
        j.view_mut((q, q), (p, p)).copy_from(&self.sigma_xx);
        j
    }

    /// Stacked group mean of (theta, X) for group z.
    fn joint_mean(&self, z: usize) -> DVector<f64> {
        let q = self.q();
        let p = self.p();
        let mut m = DVector::zeros(q + p);
        m.rows_mut(0, q).copy_from(&self.mu_theta[z]);
        m.rows_mut(q, p).copy_from(&self.mu_x[z]);
        m
    }

    /// Pre-period latent slope matrix B_theta (T x q), one row per period.
    pub fn b_theta(&self) -> DMatrix<f64> {
        let t = self.t_pre;
        let q = self.q();
        DMatrix::from_fn(t, q, |r, c| self.beta_theta[r][c])
    }

    /// Pre-period covariate slope matrix B_x (T x p).
    pub fn b_x(&self) -> DMatrix<f64> {
        let t = self.t_pre;
        let p = self.p();
        DMatrix::from_fn(t, p, |r, c| self.beta_x[r][c])
    }
}

/// Outcome of [`validate_params`]: every violated invariant, or empty if
/// the parameters are admissible.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * (1.0 + m[(i, j)].abs()) {
                return false;
            }
        }
    }
    true
}

fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.nrows() == 0 || m.clone().cholesky().is_some()
}

/// Checks every admissibility condition, report-only.
pub fn validate_params(params: &DgpParams) -> ValidationReport {
    let mut v = Vec::new();
    let q = params.q();
    let p = params.p();
    let t = params.t_pre;

    if params.n_units < 2 {
        v.push(format!("need at least 2 units, got {}", params.n_units));
    }
    if !(params.p_treated > 0.0 && params.p_treated <= 0.5) {
        v.push(format!("p outside (0, 0.5]: {}", params.p_treated));
    }
    if t == 0 {
        v.push("need at least 1 pre-treatment period".into());
    }
    if !(params.sigma_e2 >= 0.0) {
        v.push(format!(
            "noise variance must be nonnegative: {}",
            params.sigma_e2
        ));
    }
    if !params.tau.is_finite() {
        v.push("tau is not finite".into());
    }
    for (name, len) in [
        ("beta0", params.beta0.len()),
        ("beta_theta", params.beta_theta.len()),
        ("beta_x", params.beta_x.len()),
    ] {
        if len != t + 1 {
            v.push(format!("{name} must have exactly T+1 = {} entries, got {len}", t + 1));
        }
    }
    for (tt, b) in params.beta_theta.iter().enumerate() {
        if b.len() != q {
            v.push(format!("beta_theta[{tt}] has dimension {} != q = {q}", b.len()));
        }
    }
    for (tt, b) in params.beta_x.iter().enumerate() {
        if b.len() != p {
            v.push(format!("beta_x[{tt}] has dimension {} != p = {p}", b.len()));
        }
    }
    for z in 0..2 {
        if params.mu_theta[z].len() != q {
            v.push(format!("mu_theta[{z}] has dimension {} != q = {q}", params.mu_theta[z].len()));
        }
        if params.mu_x[z].len() != p {
            v.push(format!("mu_x[{z}] has dimension {} != p = {p}", params.mu_x[z].len()));
        }
    }
    if params.sigma_theta_theta.ncols() != q {
        v.push("sigma_theta_theta is not square".into());
    } else if !is_symmetric(&params.sigma_theta_theta) {
        v.push("sigma_theta_theta is not symmetric".into());
    } else if !is_positive_definite(&params.sigma_theta_theta) {
        v.push("sigma_theta_theta not positive definite".into());
    }
    if params.sigma_xx.ncols() != p {
        v.push("sigma_xx is not square".into());
    } else if !is_symmetric(&params.sigma_xx) {
        v.push("sigma_xx is not symmetric".into());
    } else if !is_positive_definite(&params.sigma_xx) {
        v.push("sigma_xx not positive definite".into());
    }
    if params.sigma_theta_x.nrows() != q || params.sigma_theta_x.ncols() != p {
        v.push(format!(
            "sigma_theta_x must be {q}x{p}, got {}x{}",
            params.sigma_theta_x.nrows(),
            params.sigma_theta_x.ncols()
        ));
    } else if !is_positive_definite(&params.joint_covariance()) {
        v.push("joint covariance not PSD".into());
    }
    ValidationReport { violations: v }
}

fn require_valid(params: &DgpParams) -> Result<()> {
    let report = validate_params(params);
    if report.is_valid() {
        Ok(())
    } else {
        Err(Error::InvalidParams(report.violations.join("; ")))
    }
}

/// Univariate restriction: q = p = 1, T = 1. The time-variation (Delta)
/// and imbalance (delta) quantities are always recomputed from the stored
/// coefficient and mean arrays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalParams {
    /// Intercepts for t = 0, 1.
    pub beta0: [f64; 2],
    /// Latent slope for t = 0, 1.
    pub beta_theta: [f64; 2],
    /// Covariate slope for t = 0, 1.
    pub beta_x: [f64; 2],
    /// Group means of theta, indexed by z.
    pub mu_theta: [f64; 2],
    /// Group means of X, indexed by z.
    pub mu_x: [f64; 2],
    pub sigma_theta: f64,
    pub sigma_x: f64,
    /// Correlation between theta and X, |rho| <= 1.
    pub rho: f64,
    pub sigma_e2: f64,
    pub tau: f64,
}

impl CanonicalParams {
    /// Time variation of the latent effect, beta_theta_1 - beta_theta_0.
    pub fn delta_theta(&self) -> f64 {
        self.beta_theta[1] - self.beta_theta[0]
    }

    /// Time variation of the covariate effect.
    pub fn delta_x(&self) -> f64 {
        self.beta_x[1] - self.beta_x[0]
    }

    /// Latent imbalance across groups, mu_theta_1 - mu_theta_0.
    pub fn imbalance_theta(&self) -> f64 {
        self.mu_theta[1] - self.mu_theta[0]
    }

    /// Covariate imbalance across groups.
    pub fn imbalance_x(&self) -> f64 {
        self.mu_x[1] - self.mu_x[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.abs() > 1.0 {
            return Err(Error::InvalidParams(format!("|rho| > 1: {}", self.rho)));
        }
        if !(self.sigma_theta > 0.0 && self.sigma_x > 0.0 && self.sigma_e2 > 0.0) {
            return Err(Error::InvalidParams(
                "sigma_theta, sigma_x, sigma_e2 must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_dgp(&self, n_units: usize, p_treated: f64, law: LatentLaw) -> DgpParams {
        DgpParams {
            n_units,
            p_treated,
            t_pre: 1,
            beta0: self.beta0.to_vec(),
            beta_theta: self
                .beta_theta
                .iter()
                .map(|&b| DVector::from_element(1, b))
                .collect(),
            beta_x: self
                .beta_x
                .iter()
                .map(|&b| DVector::from_element(1, b))
                .collect(),
            mu_theta: [
                DVector::from_element(1, self.mu_theta[0]),
                DVector::from_element(1, self.mu_theta[1]),
            ],
            mu_x: [
                DVector::from_element(1, self.mu_x[0]),
                DVector::from_element(1, self.mu_x[1]),
            ],
            sigma_theta_theta: DMatrix::from_element(1, 1, self.sigma_theta * self.sigma_theta),
            sigma_xx: DMatrix::from_element(1, 1, self.sigma_x * self.sigma_x),
            sigma_theta_x: DMatrix::from_element(
                1,
                1,
                self.rho * self.sigma_theta * self.sigma_x,
            ),
            sigma_e2: self.sigma_e2,
            tau: self.tau,
            latent_law: law,
        }
    }
}

/// Shared per-simulation context: factored covariance and slope matrices.
struct SimCtx {
    l_joint: DMatrix<f64>,
    mu: [DVector<f64>; 2],
    b_theta_all: DMatrix<f64>, // (T+1) x q
    b_x_all: DMatrix<f64>,     // (T+1) x p
    sigma_e: f64,
}

impl SimCtx {
    fn new(params: &DgpParams) -> Result<Self> {
        let d = params.q() + params.p();
        let l_joint = if d == 0 {
            DMatrix::zeros(0, 0)
        } else {
            params
                .joint_covariance()
                .cholesky()
                .ok_or_else(|| {
                    Error::InvalidParams(
                        "covariance factorization failed (joint trait covariance not positive definite)"
                            .into(),
                    )
                })?
                .unpack()
        };
        let t = params.t_pre;
        let q = params.q();
        let p = params.p();
        Ok(SimCtx {
            l_joint,
            mu: [params.joint_mean(0), params.joint_mean(1)],
            b_theta_all: DMatrix::from_fn(t + 1, q, |r, c| params.beta_theta[r][c]),
            b_x_all: DMatrix::from_fn(t + 1, p, |r, c| params.beta_x[r][c]),
            sigma_e: params.sigma_e2.sqrt(),
        })
    }
}

/// Draws traits and outcomes for units with the given treatment flags.
fn simulate_core<R: Rng>(params: &DgpParams, z: Vec<bool>, rng: &mut R) -> Result<PanelData> {
    let ctx = SimCtx::new(params)?;
    let n = z.len();
    let q = params.q();
    let p = params.p();
    let t = params.t_pre;
    let law = params.latent_law;
    let d = q + p;

    let mut y = DMatrix::zeros(n, t + 1);
    let mut x = DMatrix::zeros(n, p);
    let mut theta = DMatrix::zeros(n, q);
    let mut v = DVector::zeros(d);
    let mut w = DVector::zeros(d);
    for i in 0..n {
        let g = usize::from(z[i]);
        for k in 0..d {
            v[k] = law.draw_std(rng);
        }
        w.copy_from(&ctx.mu[g]);
        if d > 0 {
            w.gemv(1.0, &ctx.l_joint, &v, 1.0);
        }
        for k in 0..q {
            theta[(i, k)] = w[k];
        }
        for k in 0..p {
            x[(i, k)] = w[q + k];
        }
        for tt in 0..=t {
            let mut val = params.beta0[tt];
            for k in 0..q {
                val += ctx.b_theta_all[(tt, k)] * theta[(i, k)];
            }
            for k in 0..p {
                val += ctx.b_x_all[(tt, k)] * x[(i, k)];
            }
            val += ctx.sigma_e * law.draw_std(rng);
            if tt == t && z[i] {
                val += params.tau;
            }
            y[(i, tt)] = val;
        }
    }
    let ids = (0..n).map(|i| format!("u{i}")).collect();
    let theta = if q > 0 { Some(theta) } else { None };
    PanelData::new(ids, z, y, x, t, theta)
}

/// Simulates an observational panel: treatment is Bernoulli(p) per unit,
/// redrawn until n1 >= 2 and n0 >= n1 (conditioning that keeps the
/// group-fraction convention plausible at finite n; estimators divide by
/// n1). Pure function of (params, seed).
pub fn simulate(params: &DgpParams, seed: u64) -> Result<PanelData> {
    require_valid(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.n_units;
    let z = loop {
        let z: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < params.p_treated).collect();
        let n1 = z.iter().filter(|&&b| b).count();
        if n1 >= 2 && n - n1 >= n1 {
            break z;
        }
    };
    simulate_core(params, z, &mut rng)
}

/// Simulates with fixed group sizes (first `n1` units treated), as the
/// variance formulas condition on realized treatment counts.
pub fn simulate_with_sizes(
    params: &DgpParams,
    n1: usize,
    n0: usize,
    seed: u64,
) -> Result<PanelData> {
    require_valid(params)?;
    if n1 == 0 || n0 == 0 {
        return Err(Error::InvalidParams("group sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![true; n1];
    z.resize(n1 + n0, false);
    simulate_core(params, z, &mut rng)
}

/// Gaussian-conditional context for the matched-sampling oracle.
struct MatchedCtx {
    /// Regression of theta on the matched feature vector U (control law).
    k: DMatrix<f64>, // q x dim(U)
    /// Cholesky factor of the conditional covariance of theta given U.
    l_cond: DMatrix<f64>, // q x q
    /// E[U | Z = 0].
    mu_u0: DVector<f64>,
}

fn matched_ctx(params: &DgpParams, features: MatchFeatures) -> Result<MatchedCtx> {
    let q = params.q();
    let p = params.p();
    let t = params.t_pre;
    let mut warnings = Vec::new();

    let (cov_theta_u, var_u, mu_u0) = match features {
        MatchFeatures::CovariatesOnly => (
            params.sigma_theta_x.clone(),
            params.sigma_xx.clone(),
            params.mu_x[0].clone(),
        ),
        MatchFeatures::CovariatesAndPreOutcomes => {
            let b_theta = params.b_theta();
            let b_x = params.b_x();
            // Cov(X, Ypre) and Var(Ypre) under the control law.
            let cov_x_y = &params.sigma_theta_x.transpose() * b_theta.transpose()
                + &params.sigma_xx * b_x.transpose();
            let var_y = &b_theta * &params.sigma_theta_theta * b_theta.transpose()
                + &b_x * &params.sigma_xx * b_x.transpose()
                + &b_theta * &params.sigma_theta_x * b_x.transpose()
                + &b_x * &params.sigma_theta_x.transpose() * b_theta.transpose()
                + DMatrix::identity(t, t) * params.sigma_e2;
            let mut var_u = DMatrix::zeros(p + t, p + t);
            var_u.view_mut((0, 0), (p, p)).copy_from(&params.sigma_xx);
            var_u.view_mut((0, p), (p, t)).copy_from(&cov_x_y);
            var_u.view_mut((p, 0), (t, p)).copy_from(&cov_x_y.transpose());
            var_u.view_mut((p, p), (t, t)).copy_from(&var_y);

            let cov_theta_y = &params.sigma_theta_theta * b_theta.transpose()
                + &params.sigma_theta_x * b_x.transpose();
            let mut cov_theta_u = DMatrix::zeros(q, p + t);
            cov_theta_u
                .view_mut((0, 0), (q, p))
                .copy_from(&params.sigma_theta_x);
            cov_theta_u
                .view_mut((0, p), (q, t))
                .copy_from(&cov_theta_y);

            let mut mu_u0 = DVector::zeros(p + t);
            mu_u0.rows_mut(0, p).copy_from(&params.mu_x[0]);
            for s in 0..t {
                mu_u0[p + s] = params.beta0[s]
                    + params.beta_theta[s].dot(&params.mu_theta[0])
                    + params.beta_x[s].dot(&params.mu_x[0]);
            }
            (cov_theta_u, var_u, mu_u0)
        }
    };

    // K = Cov(theta, U) Var(U)^{-1}, via a symmetric solve.
    let k = crate::stats::spd_solve(
        &var_u,
        &cov_theta_u.transpose(),
        "matched-sampling feature covariance",
        &mut warnings,
    )?
    .transpose();
    let cond_cov = &params.sigma_theta_theta - &k * cov_theta_u.transpose();
    // Symmetrize before factoring to shed roundoff skew.
    let cond_cov = (&cond_cov + cond_cov.transpose()) * 0.5;
    let l_cond = if q == 0 {
        DMatrix::zeros(0, 0)
    } else {
        cond_cov.clone().cholesky().map(|c| c.unpack()).ok_or_else(|| {
            Error::Numerical(
                "conditional latent covariance is not positive definite".into(),
            )
        })?
    };
    Ok(MatchedCtx { k, l_cond, mu_u0 })
}

/// Simulates the idealized 1:1 perfectly matched design the closed-form
/// moments describe: n1 treated units drawn from the treated law, each
/// paired with a synthetic control sharing its matched features exactly,
/// with remaining latent randomness drawn from the control conditional
/// law and fresh noise. Returns the panel (treated rows first) and the
/// zero-discrepancy assignment.
///
/// Requires the gaussian latent law: the conditional construction is
/// exact only there (other families satisfy it only asymptotically).
pub fn simulate_matched_pairs(
    params: &DgpParams,
    features: MatchFeatures,
    n1: usize,
    seed: u64,
) -> Result<(PanelData, MatchAssignment)> {
    require_valid(params)?;
    if params.latent_law != LatentLaw::Gaussian {
        return Err(Error::InvalidParams(
            "matched-pair sampling requires the gaussian latent law".into(),
        ));
    }
    if n1 == 0 {
        return Err(Error::InvalidParams("need at least 1 treated unit".into()));
    }
    let ctx = SimCtx::new(params)?;
    let mctx = matched_ctx(params, features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let q = params.q();
    let p = params.p();
    let t = params.t_pre;
    let d = q + p;
    let n = 2 * n1;
    let dim_u = mctx.mu_u0.len();

    let mut y = DMatrix::zeros(n, t + 1);
    let mut x = DMatrix::zeros(n, p);
    let mut theta = DMatrix::zeros(n, q);
    let mut z = vec![false; n];
    let mut v = DVector::zeros(d);
    let mut w = DVector::zeros(d);
    let mut u = DVector::zeros(dim_u);
    let mut noise_q = DVector::zeros(q);
    let mut theta_c = DVector::zeros(q);

    for i in 0..n1 {
        z[i] = true;
        let c = n1 + i; // matched control row

        // Treated unit: traits from the treated law, full outcome row.
        for k in 0..d {
            v[k] = LatentLaw::Gaussian.draw_std(&mut rng);
        }
        w.copy_from(&ctx.mu[1]);
        if d > 0 {
            w.gemv(1.0, &ctx.l_joint, &v, 1.0);
        }
        for k in 0..q {
            theta[(i, k)] = w[k];
        }
        for k in 0..p {
            x[(i, k)] = w[q + k];
        }
        for tt in 0..=t {
            let mut val = params.beta0[tt];
            for k in 0..q {
                val += ctx.b_theta_all[(tt, k)] * theta[(i, k)];
            }
            for k in 0..p {
                val += ctx.b_x_all[(tt, k)] * x[(i, k)];
            }
            val += ctx.sigma_e * LatentLaw::Gaussian.draw_std(&mut rng);
            if tt == t {
                val += params.tau;
            }
            y[(i, tt)] = val;
        }

        // Matched feature vector of the treated unit.
        match features {
            MatchFeatures::CovariatesOnly => {
                for k in 0..p {
                    u[k] = x[(i, k)];
                }
            }
            MatchFeatures::CovariatesAndPreOutcomes => {
                for k in 0..p {
                    u[k] = x[(i, k)];
                }
                for s in 0..t {
                    u[p + s] = y[(i, s)];
                }
            }
        }

        // Control: identical matched features, latent trait from the
        // control conditional law, fresh noise where outcomes are not
        // pinned by the match.
        for k in 0..p {
            x[(c, k)] = x[(i, k)];
        }
        for k in 0..q {
            noise_q[k] = LatentLaw::Gaussian.draw_std(&mut rng);
        }
        theta_c.copy_from(&params.mu_theta[0]);
        if dim_u > 0 && q > 0 {
            let centered = &u - &mctx.mu_u0;
            theta_c.gemv(1.0, &mctx.k, &centered, 1.0);
        }
        if q > 0 {
            theta_c.gemv(1.0, &mctx.l_cond, &noise_q, 1.0);
        }
        for k in 0..q {
            theta[(c, k)] = theta_c[k];
        }
        match features {
            MatchFeatures::CovariatesOnly => {
                for tt in 0..=t {
                    let mut val = params.beta0[tt];
                    for k in 0..q {
                        val += ctx.b_theta_all[(tt, k)] * theta[(c, k)];
                    }
                    for k in 0..p {
                        val += ctx.b_x_all[(tt, k)] * x[(c, k)];
                    }
                    val += ctx.sigma_e * LatentLaw::Gaussian.draw_std(&mut rng);
                    y[(c, tt)] = val;
                }
            }
            MatchFeatures::CovariatesAndPreOutcomes => {
                // Pre-treatment outcomes equal the treated unit's by
                // construction of the match; only the post period is new.
                for s in 0..t {
                    y[(c, s)] = y[(i, s)];
                }
                let mut val = params.beta0[t];
                for k in 0..q {
                    val += ctx.b_theta_all[(t, k)] * theta[(c, k)];
                }
                for k in 0..p {
                    val += ctx.b_x_all[(t, k)] * x[(c, k)];
                }
                val += ctx.sigma_e * LatentLaw::Gaussian.draw_std(&mut rng);
                y[(c, t)] = val;
            }
        }
    }

    let ids = (0..n)
        .map(|i| {
            if i < n1 {
                format!("t{i}")
            } else {
                format!("m{}", i - n1)
            }
        })
        .collect();
    let theta = if q > 0 { Some(theta) } else { None };
    let panel = PanelData::new(ids, z, y, x, t, theta)?;
    let pairs = (0..n1).map(|i| (i, n1 + i)).collect();
    let assignment = MatchAssignment::perfect(pairs, n, features);
    Ok((panel, assignment))
}

/// RNG for replicate `r` of a run salted with `seed`: same seed, derived
/// stream, so replicates are independent and scheduling-invariant.
pub fn replicate_rng_seed(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate.wrapping_add(1));
    rng
}

/// One draw of the estimator under its sampling design: plain two-group
/// sampling for the classic estimator, matched-pair sampling for the
/// matched ones.
fn mc_single(
    params: &DgpParams,
    kind: EstimatorKind,
    n1: usize,
    n0: usize,
    seed: u64,
    replicate: u64,
) -> Result<f64> {
    // Derive a per-replicate seed from the stream so the simulate
    // functions (which take a seed) stay pure.
    let mut stream = replicate_rng_seed(seed, replicate);
    let rep_seed: u64 = stream.gen();
    match kind.match_features() {
        None => {
            let panel = simulate_with_sizes(params, n1, n0, rep_seed)?;
            Ok(estimate_classic(&panel)?.tau_hat)
        }
        Some(features) => {
            let (panel, assignment) = simulate_matched_pairs(params, features, n1, rep_seed)?;
            Ok(estimate(&panel, kind, Some(&assignment))?.tau_hat)
        }
    }
}

/// Monte Carlo draws of one estimator across `reps` replicates,
/// parallelized over replicates with derived per-replicate streams;
/// results are independent of the scheduling.
pub fn monte_carlo_estimates(
    params: &DgpParams,
    kind: EstimatorKind,
    n1: usize,
    n0: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    require_valid(params)?;
    (0..reps)
        .into_par_iter()
        .map(|r| {
            mc_single(params, kind, n1, n0, seed, r as u64)
                .map_err(|e| Error::Estimation(format!("replicate {r}: {e}")))
        })
        .collect()
}

/// Sample mean and variance of the chosen estimator across replicate
/// panels. Matched kinds run the nearest-neighbor matcher on raw features
/// inside each replicate.
pub fn empirical_moments(panels: &[PanelData], kind: EstimatorKind) -> Result<(f64, f64)> {
    if panels.len() < 2 {
        return Err(Error::InvalidData(format!(
            "need >= 2 replicates, got {}",
            panels.len()
        )));
    }
    let mut values = Vec::with_capacity(panels.len());
    for (idx, panel) in panels.iter().enumerate() {
        let value = match kind.match_features() {
            None => estimate_classic(panel).map(|e| e.tau_hat),
            Some(features) => {
                let spec = MatchSpec {
                    features,
                    method: MatchMethod::NearestNeighbor,
                    standardize: false,
                };
                match_panel(panel, &spec)
                    .and_then(|a| estimate(panel, kind, Some(&a)))
                    .map(|e| e.tau_hat)
            }
        }
        .map_err(|e| Error::Estimation(format!("replicate {idx}: {e}")))?;
        values.push(value);
    }
    Ok(mean_and_variance(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{mean, sample_variance};

    fn unit_canonical() -> CanonicalParams {
        CanonicalParams {
            beta0: [0.0, 0.0],
            beta_theta: [1.0, 1.0],
            beta_x: [1.0, 1.0],
            mu_theta: [0.0, 0.0],
            mu_x: [0.0, 0.0],
            sigma_theta: 1.0,
            sigma_x: 1.0,
            rho: 0.0,
            sigma_e2: 1.0,
            tau: 0.0,
        }
    }

    #[test]
    fn validate_accepts_identity_blocks() {
        let params = unit_canonical().to_dgp(100, 0.5, LatentLaw::Gaussian);
        assert!(validate_params(&params).is_valid());
    }

    #[test]
    fn validate_rejects_treated_fraction_above_half() {
        let mut params = unit_canonical().to_dgp(100, 0.5, LatentLaw::Gaussian);
        params.p_treated = 0.7;
        let report = validate_params(&params);
        assert!(report.violations.iter().any(|v| v.contains("p outside (0, 0.5]")));
    }

    #[test]
    fn validate_rejects_non_psd_joint_covariance() {
        let mut params = unit_canonical().to_dgp(100, 0.5, LatentLaw::Gaussian);
        // Unit variances with cross-covariance 2: determinant 1 - 4 < 0.
        params.sigma_theta_x = DMatrix::from_element(1, 1, 2.0);
        let report = validate_params(&params);
        assert!(report
            .violations
            .iter()
            .any(|v| v.contains("joint covariance not PSD")));
    }

    #[test]
    fn simulate_is_pure_in_seed() {
        let params = unit_canonical().to_dgp(50, 0.3, LatentLaw::Gaussian);
        let a = simulate(&params, 42).unwrap();
        let b = simulate(&params, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate(&params, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn simulate_respects_group_convention() {
        let params = unit_canonical().to_dgp(20, 0.5, LatentLaw::TwoPoint);
        for seed in 0..20 {
            let panel = simulate(&params, seed).unwrap();
            assert!(panel.n_treated() >= 2);
            assert!(panel.n_control() >= panel.n_treated());
        }
    }

    #[test]
    fn noiseless_no_confounder_did_is_exact() {
        let params = DgpParams {
            n_units: 40,
            p_treated: 0.5,
            t_pre: 1,
            beta0: vec![1.0, 2.5],
            beta_theta: vec![DVector::zeros(0), DVector::zeros(0)],
            beta_x: vec![DVector::zeros(0), DVector::zeros(0)],
            mu_theta: [DVector::zeros(0), DVector::zeros(0)],
            mu_x: [DVector::zeros(0), DVector::zeros(0)],
            sigma_theta_theta: DMatrix::zeros(0, 0),
            sigma_xx: DMatrix::zeros(0, 0),
            sigma_theta_x: DMatrix::zeros(0, 0),
            sigma_e2: 0.0,
            tau: 2.0,
            latent_law: LatentLaw::Gaussian,
        };
        let panel = simulate(&params, 7).unwrap();
        let est = estimate_classic(&panel).unwrap();
        assert_eq!(est.tau_hat, 2.0);
        // Every unit change equals the intercept gap (plus tau if treated).
        for i in 0..panel.n() {
            let want = if panel.is_treated(i) { 3.5 } else { 1.5 };
            assert_eq!(panel.diff_contrast(i), want);
        }
    }

    #[test]
    fn large_sample_did_vanishes_without_effect_or_breakage() {
        // Time-invariant slopes, equal group means, tau = 0: a single
        // n = 20000 panel already pins the estimate near zero.
        let params = unit_canonical().to_dgp(20_000, 0.5, LatentLaw::Gaussian);
        let panel = simulate(&params, 1).unwrap();
        let est = estimate_classic(&panel).unwrap();
        assert!(est.tau_hat.abs() < 0.05, "estimate {}", est.tau_hat);
    }

    #[test]
    fn within_group_correlation_matches_rho() {
        let mut c = unit_canonical();
        c.rho = 0.5;
        let params = c.to_dgp(50_000, 0.5, LatentLaw::Gaussian);
        let panel = simulate(&params, 11).unwrap();
        let theta = panel.latents().unwrap();
        for group in [true, false] {
            let rows: Vec<usize> = (0..panel.n())
                .filter(|&i| panel.is_treated(i) == group)
                .collect();
            let th: Vec<f64> = rows.iter().map(|&i| theta[(i, 0)]).collect();
            let xs: Vec<f64> = rows.iter().map(|&i| panel.covariates()[(i, 0)]).collect();
            let mt = mean(&th);
            let mx = mean(&xs);
            let cov: f64 = th
                .iter()
                .zip(&xs)
                .map(|(a, b)| (a - mt) * (b - mx))
                .sum::<f64>()
                / (th.len() - 1) as f64;
            let corr = cov / (sample_variance(&th).sqrt() * sample_variance(&xs).sqrt());
            assert!(
                (corr - 0.5).abs() < 0.03,
                "group {group}: corr {corr} not within 0.03 of 0.5"
            );
        }
    }

    #[test]
    fn noise_variance_recovered_from_control_residuals() {
        // Regress Y_0 on (theta, X) within the control group; the residual
        // variance recovers sigma_e2 within 3%.
        let mut c = unit_canonical();
        c.rho = 0.3;
        c.sigma_e2 = 0.49;
        let params = c.to_dgp(50_000, 0.4, LatentLaw::ShiftedUniform);
        let panel = simulate(&params, 5).unwrap();
        let theta = panel.latents().unwrap();
        let controls = panel.control_indices();
        let n = controls.len();
        let mut design = DMatrix::zeros(n, 3);
        let mut yv = DVector::zeros(n);
        for (r, &i) in controls.iter().enumerate() {
            design[(r, 0)] = 1.0;
            design[(r, 1)] = theta[(i, 0)];
            design[(r, 2)] = panel.covariates()[(i, 0)];
            yv[r] = panel.outcome(i, 0);
        }
        let xtx = design.transpose() * &design;
        let xty = design.transpose() * &yv;
        let beta = xtx.cholesky().unwrap().solve(&xty);
        let resid = &yv - &design * beta;
        let rss: f64 = resid.iter().map(|e| e * e).sum();
        let est = rss / (n as f64 - 3.0);
        assert!(
            (est - 0.49).abs() / 0.49 < 0.03,
            "residual variance {est} not within 3% of 0.49"
        );
    }

    #[test]
    fn empirical_moments_requires_two_replicates() {
        let params = unit_canonical().to_dgp(40, 0.5, LatentLaw::Gaussian);
        let panel = simulate(&params, 1).unwrap();
        let err = empirical_moments(&[panel], EstimatorKind::ClassicDid).unwrap_err();
        assert!(err.to_string().contains(">= 2 replicates"));
    }

    #[test]
    fn matched_pair_sampler_rejects_non_gaussian_laws() {
        let params = unit_canonical().to_dgp(40, 0.5, LatentLaw::TwoPoint);
        assert!(simulate_matched_pairs(&params, MatchFeatures::CovariatesOnly, 10, 0).is_err());
    }

    #[test]
    fn matched_pair_sampler_pins_matched_features() {
        let mut c = unit_canonical();
        c.rho = 0.6;
        c.mu_theta = [0.0, 1.0];
        c.mu_x = [0.0, 0.5];
        let params = c.to_dgp(100, 0.5, LatentLaw::Gaussian);
        let (panel, a) =
            simulate_matched_pairs(&params, MatchFeatures::CovariatesAndPreOutcomes, 25, 3)
                .unwrap();
        assert_eq!(a.n_matched(), 25);
        assert_eq!(a.delta_n(), 0.0);
        for &(t_row, c_row) in a.pairs() {
            assert_eq!(panel.covariates()[(t_row, 0)], panel.covariates()[(c_row, 0)]);
            assert_eq!(panel.outcome(t_row, 0), panel.outcome(c_row, 0));
            assert!(panel.is_treated(t_row));
            assert!(!panel.is_treated(c_row));
        }
    }
}
