//! 1:1 injective treated-to-control matching with discrepancy diagnostics.
//!
//! The default matcher is a deterministic greedy nearest-neighbor pass
//! (treated units in ascending order, ties to the lowest control index).
//! [`optimal_match`] solves the min-total-distance assignment exactly and
//! serves as a quality ceiling for the greedy matcher.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelData;

/// Which feature set a match is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchFeatures {
    /// W = X.
    CovariatesOnly,
    /// W = (X, Y_0 .. Y_{T-1}).
    CovariatesAndPreOutcomes,
}

impl MatchFeatures {
    pub fn label(self) -> &'static str {
        match self {
            MatchFeatures::CovariatesOnly => "covariates_only",
            MatchFeatures::CovariatesAndPreOutcomes => "covariates_and_preoutcomes",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    /// Greedy nearest neighbor that errors unless every pair distance is 0.
    Exact,
    NearestNeighbor,
    /// Nearest neighbor; pairs farther than `width` are dropped.
    Caliper { width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub features: MatchFeatures,
    pub method: MatchMethod,
    /// Z-score features on the pooled sample before computing distances.
    pub standardize: bool,
}

impl MatchSpec {
    pub fn nearest(features: MatchFeatures) -> Self {
        MatchSpec {
            features,
            method: MatchMethod::NearestNeighbor,
            standardize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let MatchMethod::Caliper { width } = self.method {
            if !(width > 0.0) {
                return Err(Error::Config(format!(
                    "caliper width must be positive, got {width}"
                )));
            }
        }
        Ok(())
    }
}

/// An injective treated-to-control assignment plus the discrepancy
/// diagnostics that operationalize the close-to-perfect matching condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// (treated unit row, control unit row), global panel indices.
    pairs: Vec<(usize, usize)>,
    /// Feature distance per pair, same order as `pairs`.
    distances: Vec<f64>,
    /// Per-unit matched-control indicator M_i (implies Z_i = 0).
    m_flags: Vec<bool>,
    /// Mean pair distance.
    delta_n: f64,
    /// Mean squared pair distance.
    xi_n: f64,
    /// Treated rows left unmatched (caliper drops or exhausted controls).
    unmatched_treated: Vec<usize>,
    features: MatchFeatures,
}

impl MatchAssignment {
    fn from_pairs(
        pairs: Vec<(usize, usize)>,
        distances: Vec<f64>,
        unmatched_treated: Vec<usize>,
        n_units: usize,
        features: MatchFeatures,
    ) -> Self {
        let mut m_flags = vec![false; n_units];
        for &(_, c) in &pairs {
            m_flags[c] = true;
        }
        let (delta_n, xi_n) = if pairs.is_empty() {
            (0.0, 0.0)
        } else {
            let k = pairs.len() as f64;
            let d: f64 = distances.iter().sum();
            let d2: f64 = distances.iter().map(|d| d * d).sum();
            (d / k, d2 / k)
        };
        MatchAssignment {
            pairs,
            distances,
            m_flags,
            delta_n,
            xi_n,
            unmatched_treated,
            features,
        }
    }

    /// Assignment for synthetically constructed exact pairs (distance 0),
    /// as produced by the matched-sampling simulator.
    pub fn perfect(pairs: Vec<(usize, usize)>, n_units: usize, features: MatchFeatures) -> Self {
        let distances = vec![0.0; pairs.len()];
        Self::from_pairs(pairs, distances, Vec::new(), n_units, features)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    /// Effective number of matches, n-tilde.
    pub fn n_matched(&self) -> usize {
        self.pairs.len()
    }

    pub fn m_flags(&self) -> &[bool] {
        &self.m_flags
    }

    pub fn is_matched_control(&self, unit: usize) -> bool {
        self.m_flags[unit]
    }

    pub fn delta_n(&self) -> f64 {
        self.delta_n
    }

    pub fn xi_n(&self) -> f64 {
        self.xi_n
    }

    pub fn unmatched_treated(&self) -> &[usize] {
        &self.unmatched_treated
    }

    pub fn features(&self) -> MatchFeatures {
        self.features
    }

    pub fn total_distance(&self) -> f64 {
        self.distances.iter().sum()
    }

    /// CSV export: `treated_id,control_id,distance`, one row per pair.
    pub fn to_csv(&self, panel: &PanelData) -> String {
        let mut out = String::from("treated_id,control_id,distance\n");
        for (k, &(t, c)) in self.pairs.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                panel.unit_ids()[t],
                panel.unit_ids()[c],
                crate::io::fmt_f64(self.distances[k])
            ));
        }
        out
    }
}

/// Scaled discrepancy diagnostics for rate checks across growing n.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub delta_n: f64,
    pub xi_n: f64,
    /// delta_n * sqrt(n); should vanish under close-to-perfect matching.
    pub delta_scaled: f64,
    /// xi_n * n; should vanish likewise.
    pub xi_scaled: f64,
    /// Set when the assignment held no pairs.
    pub empty: bool,
}

/// Returns (delta_n, xi_n, delta_n*sqrt(n), xi_n*n) for rate diagnostics.
pub fn discrepancy_report(assignment: &MatchAssignment, n: usize) -> DiscrepancyReport {
    let empty = assignment.pairs.is_empty();
    DiscrepancyReport {
        delta_n: assignment.delta_n,
        xi_n: assignment.xi_n,
        delta_scaled: assignment.delta_n * (n as f64).sqrt(),
        xi_scaled: assignment.xi_n * n as f64,
        empty,
    }
}

/// Feature matrix W per unit for the requested feature set, optionally
/// z-scored on the pooled sample. Zero-variance columns are left unscaled.
fn feature_matrix(panel: &PanelData, spec: &MatchSpec) -> Result<DMatrix<f64>> {
    let n = panel.n();
    let p = panel.n_covariates();
    let t = panel.t_pre();
    let d = match spec.features {
        MatchFeatures::CovariatesOnly => p,
        MatchFeatures::CovariatesAndPreOutcomes => p + t,
    };
    if d == 0 {
        return Err(Error::Config("matching feature set is empty".into()));
    }
    let mut w = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..p {
            w[(i, j)] = panel.covariates()[(i, j)];
        }
        if spec.features == MatchFeatures::CovariatesAndPreOutcomes {
            for s in 0..t {
                w[(i, p + s)] = panel.outcome(i, s);
            }
        }
    }
    if spec.standardize {
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| w[(i, j)]).collect();
            let m = crate::stats::mean(&col);
            let sd = crate::stats::sample_variance(&col).sqrt();
            if sd > 0.0 {
                for i in 0..n {
                    w[(i, j)] = (w[(i, j)] - m) / sd;
                }
            }
        }
    }
    Ok(w)
}

fn squared_distance(w: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    let d = w.ncols();
    let mut s = 0.0;
    for j in 0..d {
        let diff = w[(a, j)] - w[(b, j)];
        s += diff * diff;
    }
    s
}

/// Greedy sequential 1:1 matching without replacement.
///
/// Treated units are processed in ascending row order; each takes its
/// nearest still-unmatched control, ties broken by lowest control index.
/// Exact mode errors if any pair distance exceeds zero; caliper mode drops
/// pairs wider than the caliper instead of consuming the control.
pub fn match_panel(panel: &PanelData, spec: &MatchSpec) -> Result<MatchAssignment> {
    spec.validate()?;
    let w = feature_matrix(panel, spec)?;
    let treated = panel.treated_indices();
    let controls = panel.control_indices();
    let caliper = match spec.method {
        MatchMethod::Caliper { width } => Some(width),
        _ => None,
    };
    if caliper.is_none() && controls.len() < treated.len() {
        return Err(Error::Matching(format!(
            "insufficient controls: {} treated but only {} controls",
            treated.len(),
            controls.len()
        )));
    }

    let mut used = vec![false; controls.len()];
    let mut pairs = Vec::with_capacity(treated.len());
    let mut distances = Vec::with_capacity(treated.len());
    let mut unmatched = Vec::new();
    for &t_row in &treated {
        let mut best: Option<(f64, usize)> = None;
        for (c_idx, &c_row) in controls.iter().enumerate() {
            if used[c_idx] {
                continue;
            }
            let d2 = squared_distance(&w, t_row, c_row);
            if best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, c_idx));
            }
        }
        match best {
            None => unmatched.push(t_row),
            Some((d2, c_idx)) => {
                let dist = d2.sqrt();
                if spec.method == MatchMethod::Exact && dist > 0.0 {
                    return Err(Error::Matching(format!(
                        "no exact match for treated unit {} (nearest distance {dist})",
                        panel.unit_ids()[t_row]
                    )));
                }
                if let Some(width) = caliper {
                    if dist > width {
                        unmatched.push(t_row);
                        continue;
                    }
                }
                used[c_idx] = true;
                pairs.push((t_row, controls[c_idx]));
                distances.push(dist);
            }
        }
    }
    Ok(MatchAssignment::from_pairs(
        pairs,
        distances,
        unmatched,
        panel.n(),
        spec.features,
    ))
}

/// Exact minimum-total-distance 1:1 assignment (shortest augmenting path).
///
/// Serves as the optimality ceiling for [`match_panel`]. Caliper specs are
/// solved on the full distance matrix first; pairs wider than the caliper
/// are then dropped, mirroring the greedy semantics.
pub fn optimal_match(panel: &PanelData, spec: &MatchSpec) -> Result<MatchAssignment> {
    spec.validate()?;
    if spec.method == MatchMethod::Exact {
        return Err(Error::Config(
            "optimal_match supports nearest_neighbor or caliper specs only".into(),
        ));
    }
    let w = feature_matrix(panel, spec)?;
    let treated = panel.treated_indices();
    let controls = panel.control_indices();
    if controls.len() < treated.len() {
        return Err(Error::Matching(format!(
            "insufficient controls: {} treated but only {} controls",
            treated.len(),
            controls.len()
        )));
    }
    let mut cost = DMatrix::zeros(treated.len(), controls.len());
    for (i, &t_row) in treated.iter().enumerate() {
        for (j, &c_row) in controls.iter().enumerate() {
            cost[(i, j)] = squared_distance(&w, t_row, c_row).sqrt();
        }
    }
    let col_of_row = solve_assignment(&cost);
    let mut pairs = Vec::with_capacity(treated.len());
    let mut distances = Vec::with_capacity(treated.len());
    let mut unmatched = Vec::new();
    for (i, &t_row) in treated.iter().enumerate() {
        let j = col_of_row[i];
        let dist = cost[(i, j)];
        if let MatchMethod::Caliper { width } = spec.method {
            if dist > width {
                unmatched.push(t_row);
                continue;
            }
        }
        pairs.push((t_row, controls[j]));
        distances.push(dist);
    }
    Ok(MatchAssignment::from_pairs(
        pairs,
        distances,
        unmatched,
        panel.n(),
        spec.features,
    ))
}

/// Solves the rectangular assignment problem (rows <= columns), returning
/// the column assigned to each row. Jonker-Volgenant style shortest
/// augmenting path with potentials; O(rows^2 * cols).
fn solve_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let nr = cost.nrows();
    let nc = cost.ncols();
    assert!(nr <= nc, "assignment needs rows <= columns");
    // 1-based with a virtual column 0; p[j] = row matched to column j.
    let mut u = vec![0.0; nr + 1];
    let mut v = vec![0.0; nc + 1];
    let mut p = vec![0usize; nc + 1];
    let mut way = vec![0usize; nc + 1];
    for i in 1..=nr {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; nc + 1];
        let mut used = vec![false; nc + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=nc {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=nc {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![usize::MAX; nr];
    for j in 1..=nc {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}
