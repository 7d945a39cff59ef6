//! Small numeric helpers shared across modules.
//!
//! All accumulations run in a fixed (index) order with Kahan compensation,
//! so results do not depend on how work was scheduled upstream.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Kahan-compensated sum.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Arithmetic mean; 0.0 on empty input.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    kahan_sum(values.iter().copied()) / values.len() as f64
}

/// Sample variance with n-1 denominator.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    kahan_sum(values.iter().map(|v| (v - m) * (v - m))) / (n - 1) as f64
}

/// Mean and sample variance in one pass over a replicate vector.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    (mean(values), sample_variance(values))
}

/// Pooled within-group covariance matrix with an n-1 denominator.
///
/// Rows of `data` are observations (d columns); `groups[i]` is the group
/// label of row i. Each group is demeaned by its own mean before the sums
/// of squares are pooled, so between-group mean separation does not leak
/// into the estimate.
pub fn pooled_group_covariance(data: &DMatrix<f64>, groups: &[bool]) -> Result<DMatrix<f64>> {
    let n = data.nrows();
    let d = data.ncols();
    if n != groups.len() {
        return Err(Error::InvalidData(format!(
            "covariance input has {n} rows but {} group labels",
            groups.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidData(
            "need at least 2 observations for a covariance".into(),
        ));
    }
    let mut mean1 = DVector::zeros(d);
    let mut mean0 = DVector::zeros(d);
    let (mut n1, mut n0) = (0usize, 0usize);
    for (i, &g) in groups.iter().enumerate() {
        let row = data.row(i).transpose();
        if g {
            mean1 += &row;
            n1 += 1;
        } else {
            mean0 += &row;
            n0 += 1;
        }
    }
    if n1 > 0 {
        mean1 /= n1 as f64;
    }
    if n0 > 0 {
        mean0 /= n0 as f64;
    }
    let mut ss = DMatrix::zeros(d, d);
    for (i, &g) in groups.iter().enumerate() {
        let centered = data.row(i).transpose() - if g { &mean1 } else { &mean0 };
        ss += &centered * centered.transpose();
    }
    Ok(ss / (n - 1) as f64)
}

/// Pooled within-group variance of a scalar column (n-1 denominator).
pub fn pooled_group_variance(values: &[f64], groups: &[bool]) -> Result<f64> {
    let data = DMatrix::from_column_slice(values.len(), 1, values);
    Ok(pooled_group_covariance(&data, groups)?[(0, 0)])
}

/// Group-mean contrast: mean over `groups[i] == true` minus mean over false.
pub fn group_mean_contrast(values: &[f64], groups: &[bool]) -> Result<f64> {
    let treated: Vec<f64> = values
        .iter()
        .zip(groups)
        .filter(|(_, g)| **g)
        .map(|(v, _)| *v)
        .collect();
    let control: Vec<f64> = values
        .iter()
        .zip(groups)
        .filter(|(_, g)| !**g)
        .map(|(v, _)| *v)
        .collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::InvalidData("empty group in mean contrast".into()));
    }
    Ok(mean(&treated) - mean(&control))
}

/// Condition-number guard thresholds for symmetric solves.
pub const COND_WARN: f64 = 1e10;
pub const COND_ERROR: f64 = 1e14;

/// Solve A·X = B for symmetric positive-definite A with a condition-number
/// guard. Warnings (condition above [`COND_WARN`]) are appended to
/// `warnings`; condition above [`COND_ERROR`] or a non-PD matrix is an
/// error carrying the condition estimate.
pub fn spd_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    label: &str,
    warnings: &mut Vec<String>,
) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if d == 0 {
        return Ok(DMatrix::zeros(0, b.ncols()));
    }
    let eig = a.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let lam_min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if lam_min <= 0.0 {
        return Err(Error::Numerical(format!(
            "{label}: matrix not positive definite (min eigenvalue {lam_min:.3e})"
        )));
    }
    let cond = lam_max / lam_min;
    if cond > COND_ERROR {
        return Err(Error::Numerical(format!(
            "{label}: condition number {cond:.3e} exceeds {COND_ERROR:.0e}"
        )));
    }
    if cond > COND_WARN {
        warnings.push(format!(
            "{label}: condition number {cond:.3e} above warn threshold {COND_WARN:.0e}"
        ));
    }
    let chol = a.clone().cholesky().ok_or_else(|| {
        Error::Numerical(format!("{label}: Cholesky factorization failed"))
    })?;
    Ok(chol.solve(b))
}

/// Largest singular value (spectral norm).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values[0]
}
