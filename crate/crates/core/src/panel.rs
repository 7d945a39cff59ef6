//! Balanced-panel container: the observable world every estimator consumes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A balanced panel of outcomes, treatment flags and time-invariant
/// covariates. Outcomes cover periods `0..=t_pre`, with `t_pre` the single
/// post-treatment period index.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    unit_ids: Vec<String>,
    z: Vec<bool>,
    /// n x (t_pre + 1) outcome matrix.
    y: DMatrix<f64>,
    /// n x p covariate matrix.
    x: DMatrix<f64>,
    t_pre: usize,
    /// Latent traits retained only for diagnostics on synthetic panels;
    /// never consumed by estimators.
    theta: Option<DMatrix<f64>>,
}

/// Summary counts used in logs and reports.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PanelSummary {
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub t_pre: usize,
    pub n_covariates: usize,
}

impl PanelData {
    /// Builds a panel, validating shapes. Group-size conventions
    /// (n0 >= n1 >= 2) are checked separately at load time via
    /// [`PanelData::check_group_convention`].
    pub fn new(
        unit_ids: Vec<String>,
        z: Vec<bool>,
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        t_pre: usize,
        theta: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        if n == 0 {
            return Err(Error::InvalidData("panel has no units".into()));
        }
        if z.len() != n {
            return Err(Error::InvalidData(format!(
                "treatment flags: expected {n}, got {}",
                z.len()
            )));
        }
        if t_pre == 0 {
            return Err(Error::InvalidData(
                "need at least one pre-treatment period".into(),
            ));
        }
        if y.nrows() != n || y.ncols() != t_pre + 1 {
            return Err(Error::InvalidData(format!(
                "outcome matrix: expected {n}x{}, got {}x{}",
                t_pre + 1,
                y.nrows(),
                y.ncols()
            )));
        }
        if x.nrows() != n {
            return Err(Error::InvalidData(format!(
                "covariate matrix: expected {n} rows, got {}",
                x.nrows()
            )));
        }
        if !y.iter().all(|v| v.is_finite()) || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidData("non-finite value in panel".into()));
        }
        if let Some(th) = &theta {
            if th.nrows() != n {
                return Err(Error::InvalidData(format!(
                    "latent matrix: expected {n} rows, got {}",
                    th.nrows()
                )));
            }
        }
        Ok(Self {
            unit_ids,
            z,
            y,
            x,
            t_pre,
            theta,
        })
    }

    /// Enforces the maintained convention n0 >= n1 >= 2. Violations are
    /// load-time errors for observational data.
    pub fn check_group_convention(&self) -> Result<()> {
        let n1 = self.n_treated();
        let n0 = self.n_control();
        if n1 < 2 {
            return Err(Error::InvalidData(format!(
                "need at least 2 treated units, found {n1}"
            )));
        }
        if n0 < n1 {
            return Err(Error::InvalidData(format!(
                "control group ({n0}) smaller than treated group ({n1})"
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&t| t).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// Number of covariate columns.
    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Index of the single post-treatment period (= number of pre periods).
    pub fn t_pre(&self) -> usize {
        self.t_pre
    }

    pub fn n_periods(&self) -> usize {
        self.t_pre + 1
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn treatment_flags(&self) -> &[bool] {
        &self.z
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.z[i]
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn latents(&self) -> Option<&DMatrix<f64>> {
        self.theta.as_ref()
    }

    pub fn outcome(&self, unit: usize, t: usize) -> f64 {
        self.y[(unit, t)]
    }

    /// Post-period outcome Y_{i,T}.
    pub fn post_outcome(&self, unit: usize) -> f64 {
        self.y[(unit, self.t_pre)]
    }

    /// Average of the T pre-treatment outcomes for one unit.
    pub fn pre_mean(&self, unit: usize) -> f64 {
        let mut s = 0.0;
        for t in 0..self.t_pre {
            s += self.y[(unit, t)];
        }
        s / self.t_pre as f64
    }

    /// Post outcome minus pre-period average: the unit-level contrast every
    /// differencing estimator is built from.
    pub fn diff_contrast(&self, unit: usize) -> f64 {
        self.post_outcome(unit) - self.pre_mean(unit)
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.z[i]).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.z[i]).collect()
    }

    pub fn summary(&self) -> PanelSummary {
        PanelSummary {
            n: self.n(),
            n_treated: self.n_treated(),
            n_control: self.n_control(),
            t_pre: self.t_pre,
            n_covariates: self.n_covariates(),
        }
    }

    /// New panel holding the given rows (indices may repeat, as in a
    /// bootstrap resample). Unit ids are suffixed with the draw position so
    /// the result still has unique ids.
    pub fn select_rows(&self, rows: &[usize]) -> Result<PanelData> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut z = Vec::with_capacity(rows.len());
        let mut y = DMatrix::zeros(rows.len(), self.n_periods());
        let mut x = DMatrix::zeros(rows.len(), self.n_covariates());
        for (pos, &r) in rows.iter().enumerate() {
            if r >= self.n() {
                return Err(Error::InvalidData(format!("row {r} out of range")));
            }
            ids.push(format!("{}#{pos}", self.unit_ids[r]));
            z.push(self.z[r]);
            y.row_mut(pos).copy_from(&self.y.row(r));
            x.row_mut(pos).copy_from(&self.x.row(r));
        }
        PanelData::new(ids, z, y, x, self.t_pre, None)
    }
}
