//! The three point estimators, in canonical (T = 1) and generalized
//! (T > 1, pre-period averaging) form. All are pure sample means of
//! unit-level contrasts; no regression machinery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{MatchAssignment, MatchFeatures};
use crate::panel::PanelData;
use crate::stats::mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Unmatched difference-in-differences on the full sample.
    ClassicDid,
    /// DiD after 1:1 matching on covariates.
    MatchedX,
    /// Post-period difference in means after matching on covariates and
    /// all pre-treatment outcomes.
    MatchedXY,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [
        EstimatorKind::ClassicDid,
        EstimatorKind::MatchedX,
        EstimatorKind::MatchedXY,
    ];

    /// Feature set the matched variants require; `None` for classic.
    pub fn match_features(self) -> Option<MatchFeatures> {
        match self {
            EstimatorKind::ClassicDid => None,
            EstimatorKind::MatchedX => Some(MatchFeatures::CovariatesOnly),
            EstimatorKind::MatchedXY => Some(MatchFeatures::CovariatesAndPreOutcomes),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::ClassicDid => "classic_did",
            EstimatorKind::MatchedX => "matched_x",
            EstimatorKind::MatchedXY => "matched_x_y",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreMeanBasis {
    SinglePeriod,
    AveragedT,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResult {
    pub kind: EstimatorKind,
    pub tau_hat: f64,
    pub n1: usize,
    /// n0 for the classic estimator, realized n-tilde for matched ones.
    pub n0_or_ntilde: usize,
    pub pre_mean_basis: PreMeanBasis,
}

fn basis(panel: &PanelData) -> PreMeanBasis {
    if panel.t_pre() == 1 {
        PreMeanBasis::SinglePeriod
    } else {
        PreMeanBasis::AveragedT
    }
}

fn finite(kind: EstimatorKind, tau_hat: f64) -> Result<f64> {
    if tau_hat.is_finite() {
        Ok(tau_hat)
    } else {
        Err(Error::Numerical(format!(
            "{} estimate is not finite",
            kind.label()
        )))
    }
}

/// Classic unmatched DiD: treated mean of (Y_T - pre-average) minus the
/// same mean over all controls.
pub fn estimate_classic(panel: &PanelData) -> Result<EstimateResult> {
    let treated = panel.treated_indices();
    let controls = panel.control_indices();
    if treated.is_empty() || controls.is_empty() {
        return Err(Error::Estimation(format!(
            "degenerate group: {} treated, {} controls",
            treated.len(),
            controls.len()
        )));
    }
    let dt: Vec<f64> = treated.iter().map(|&i| panel.diff_contrast(i)).collect();
    let dc: Vec<f64> = controls.iter().map(|&i| panel.diff_contrast(i)).collect();
    let tau_hat = finite(EstimatorKind::ClassicDid, mean(&dt) - mean(&dc))?;
    Ok(EstimateResult {
        kind: EstimatorKind::ClassicDid,
        tau_hat,
        n1: treated.len(),
        n0_or_ntilde: controls.len(),
        pre_mean_basis: basis(panel),
    })
}

fn check_features(
    kind: EstimatorKind,
    assignment: &MatchAssignment,
) -> Result<()> {
    let want = kind.match_features().expect("matched estimator");
    if assignment.features() != want {
        return Err(Error::Config(format!(
            "{} requires an assignment built on {} features, got {}",
            kind.label(),
            want.label(),
            assignment.features().label()
        )));
    }
    Ok(())
}

/// Matching-on-covariates DiD: treated mean of (Y_T - pre-average) minus
/// the same mean over matched controls only.
pub fn estimate_matched_x(
    panel: &PanelData,
    assignment: &MatchAssignment,
) -> Result<EstimateResult> {
    check_features(EstimatorKind::MatchedX, assignment)?;
    let treated = panel.treated_indices();
    if treated.is_empty() {
        return Err(Error::Estimation("degenerate group: no treated units".into()));
    }
    if assignment.n_matched() == 0 {
        return Err(Error::Estimation("empty assignment".into()));
    }
    let dt: Vec<f64> = treated.iter().map(|&i| panel.diff_contrast(i)).collect();
    let dm: Vec<f64> = (0..panel.n())
        .filter(|&i| assignment.is_matched_control(i))
        .map(|i| panel.diff_contrast(i))
        .collect();
    let tau_hat = finite(EstimatorKind::MatchedX, mean(&dt) - mean(&dm))?;
    Ok(EstimateResult {
        kind: EstimatorKind::MatchedX,
        tau_hat,
        n1: treated.len(),
        n0_or_ntilde: assignment.n_matched(),
        pre_mean_basis: basis(panel),
    })
}

/// Matching additionally on pre-treatment outcomes collapses the panel:
/// a pure post-period difference in means between treated and matched
/// controls.
pub fn estimate_matched_xy(
    panel: &PanelData,
    assignment: &MatchAssignment,
) -> Result<EstimateResult> {
    check_features(EstimatorKind::MatchedXY, assignment)?;
    let treated = panel.treated_indices();
    if treated.is_empty() {
        return Err(Error::Estimation("degenerate group: no treated units".into()));
    }
    if assignment.n_matched() == 0 {
        return Err(Error::Estimation("empty assignment".into()));
    }
    let yt: Vec<f64> = treated.iter().map(|&i| panel.post_outcome(i)).collect();
    let ym: Vec<f64> = (0..panel.n())
        .filter(|&i| assignment.is_matched_control(i))
        .map(|i| panel.post_outcome(i))
        .collect();
    let tau_hat = finite(EstimatorKind::MatchedXY, mean(&yt) - mean(&ym))?;
    Ok(EstimateResult {
        kind: EstimatorKind::MatchedXY,
        tau_hat,
        n1: treated.len(),
        n0_or_ntilde: assignment.n_matched(),
        pre_mean_basis: basis(panel),
    })
}

/// Dispatch helper: classic ignores the assignment, matched kinds require
/// one built on the corresponding feature set.
pub fn estimate(
    panel: &PanelData,
    kind: EstimatorKind,
    assignment: Option<&MatchAssignment>,
) -> Result<EstimateResult> {
    match kind {
        EstimatorKind::ClassicDid => estimate_classic(panel),
        EstimatorKind::MatchedX => {
            let a = assignment.ok_or_else(|| {
                Error::Config("matched_x needs a match assignment".into())
            })?;
            estimate_matched_x(panel, a)
        }
        EstimatorKind::MatchedXY => {
            let a = assignment.ok_or_else(|| {
                Error::Config("matched_x_y needs a match assignment".into())
            })?;
            estimate_matched_xy(panel, a)
        }
    }
}
