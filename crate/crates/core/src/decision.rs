//! The match-or-not guideline: compare plug-in MSEs, fall back to the
//! bias or variance criterion by sample-size regime, and report every
//! quantity with a stratified-bootstrap standard error.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::replicate_rng_seed;
use crate::error::{Error, Result};
use crate::estimators::{estimate, estimate_classic, EstimatorKind};
use crate::matching::{match_panel, MatchFeatures, MatchMethod, MatchSpec};
use crate::oracle::{sample_factor, EstimatorTriple};
use crate::panel::PanelData;
use crate::plugin;
use crate::stats;
use crate::REPORT_SCHEMA_VERSION;

/// Configuration of the step-by-step guideline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidelineConfig {
    /// Step 1: the analyst asserts parallel trends on domain knowledge.
    pub pt_asserted: bool,
    /// Step 2: two MSEs within this relative gap count as "similar".
    pub mse_similarity_rel_tol: f64,
    /// Step 3: at or above this many treated units the bias criterion
    /// applies; below it the variance criterion does.
    pub large_sample_threshold: usize,
    /// Bootstrap replications for standard errors; 0 disables the
    /// bootstrap (cells then carry no SE).
    pub bootstrap_reps: usize,
    pub seed: u64,
    /// Matching method for the matched estimators.
    pub match_method: MatchMethod,
    /// Standardize features before matching.
    pub standardize_features: bool,
}

impl Default for GuidelineConfig {
    fn default() -> Self {
        GuidelineConfig {
            pt_asserted: false,
            mse_similarity_rel_tol: 0.10,
            large_sample_threshold: 1000,
            bootstrap_reps: 5000,
            seed: 0,
            match_method: MatchMethod::NearestNeighbor,
            standardize_features: true,
        }
    }
}

impl GuidelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mse_similarity_rel_tol > 0.0) {
            return Err(Error::Config(
                "mse_similarity_rel_tol must be positive".into(),
            ));
        }
        if self.bootstrap_reps != 0 && self.bootstrap_reps < 100 {
            return Err(Error::Config(
                "bootstrap_reps must be 0 (disabled) or at least 100".into(),
            ));
        }
        Ok(())
    }

    fn spec_for(&self, features: MatchFeatures) -> MatchSpec {
        MatchSpec {
            features,
            method: self.match_method,
            standardize: self.standardize_features,
        }
    }
}

/// A reported value with an optional bootstrap standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    pub se: Option<f64>,
}

impl Cell {
    pub fn bare(value: f64) -> Self {
        Cell { value, se: None }
    }
}

/// Everything the guideline and the table renderer consume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionTables {
    pub bias: EstimatorTriple<Cell>,
    /// Square root of the full variance.
    pub sv: EstimatorTriple<Cell>,
    pub mse: EstimatorTriple<Cell>,
    pub n1: usize,
    pub n0: usize,
    /// Realized matches for the covariate-matched estimator.
    pub n_tilde_x: usize,
    /// Realized matches for the covariate-and-pre-outcome estimator.
    pub n_tilde_xy: usize,
    /// Point estimates per strategy, when computed from a panel.
    pub tau_hat: Option<EstimatorTriple<f64>>,
}

impl DecisionTables {
    /// Total units the strategy consumes (the table's sample-size row).
    pub fn used_sample_size(&self, kind: EstimatorKind) -> usize {
        match kind {
            EstimatorKind::ClassicDid => self.n1 + self.n0,
            EstimatorKind::MatchedX => self.n1 + self.n_tilde_x,
            EstimatorKind::MatchedXY => self.n1 + self.n_tilde_xy,
        }
    }
}

/// One applied step of the guideline, with the inputs it saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum CriterionStep {
    /// Parallel trends asserted by the analyst; the unmatched estimator
    /// identifies the effect and uses the most data.
    PtAsserted,
    /// MSE comparison across the three strategies.
    MseComparison {
        mse: [f64; 3],
        rel_tol: f64,
        /// Present when one estimator beats both others by more than the
        /// tolerance.
        strict_winner: Option<EstimatorKind>,
    },
    /// Large-sample fallback: compare absolute bias of the two matched
    /// strategies (covariate matching dominates the unmatched bias under
    /// the maintained sign conditions).
    BiasCriterion {
        abs_bias_matched_x: f64,
        abs_bias_matched_xy: f64,
        chosen: EstimatorKind,
        assumption: String,
    },
    /// Small-sample fallback: compare full variances of the unmatched and
    /// covariate-matched strategies (matching additionally on
    /// pre-outcomes never increases variance).
    VarianceCriterion {
        var_full_classic: f64,
        var_full_matched_x: f64,
        chosen: EstimatorKind,
        assumption: String,
    },
}

/// The guideline's outcome: chosen strategy, the full criteria trail,
/// the report tables, and the bias-corrected effect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decision {
    pub schema_version: u32,
    pub chosen: EstimatorKind,
    pub criteria_path: Vec<CriterionStep>,
    pub tables: DecisionTables,
    /// Chosen strategy's point estimate minus its estimated bias.
    pub bias_corrected_tau: Option<f64>,
    pub warnings: Vec<String>,
}

impl Decision {
    /// Re-derives the chosen estimator from the recorded comparisons
    /// alone. `None` if the trail is empty or ends undecided.
    pub fn replay_choice(&self) -> Option<EstimatorKind> {
        let mut choice = None;
        for step in &self.criteria_path {
            match step {
                CriterionStep::PtAsserted => choice = Some(EstimatorKind::ClassicDid),
                CriterionStep::MseComparison { strict_winner, .. } => {
                    if let Some(k) = strict_winner {
                        choice = Some(*k);
                    }
                }
                CriterionStep::BiasCriterion { chosen, .. }
                | CriterionStep::VarianceCriterion { chosen, .. } => choice = Some(*chosen),
            }
        }
        choice
    }
}

/// Applies the guideline steps to precomputed tables. This is the
/// decision logic shared by [`decide`] and by replays on externally
/// supplied report values.
pub fn decide_from_tables(
    tables: DecisionTables,
    config: &GuidelineConfig,
    mut warnings: Vec<String>,
) -> Result<Decision> {
    config.validate()?;
    let mut path = Vec::new();
    let chosen;

    if config.pt_asserted {
        path.push(CriterionStep::PtAsserted);
        chosen = EstimatorKind::ClassicDid;
    } else {
        let mse = [
            tables.mse.classic.value,
            tables.mse.matched_x.value,
            tables.mse.matched_xy.value,
        ];
        let kinds = EstimatorKind::ALL;
        let mut win = 0;
        for j in 1..3 {
            if mse[j] < mse[win] {
                win = j;
            }
        }
        let similar = |a: f64, b: f64| (a - b).abs() <= config.mse_similarity_rel_tol * a.abs().max(b.abs());
        let strict = (0..3).all(|j| j == win || !similar(mse[win], mse[j]));
        let strict_winner = strict.then_some(kinds[win]);
        path.push(CriterionStep::MseComparison {
            mse,
            rel_tol: config.mse_similarity_rel_tol,
            strict_winner,
        });

        if let Some(k) = strict_winner {
            chosen = k;
        } else if tables.n1 >= config.large_sample_threshold {
            let abs_x = tables.bias.matched_x.value.abs();
            let abs_xy = tables.bias.matched_xy.value.abs();
            let pick = if abs_xy <= abs_x {
                EstimatorKind::MatchedXY
            } else {
                EstimatorKind::MatchedX
            };
            path.push(CriterionStep::BiasCriterion {
                abs_bias_matched_x: abs_x,
                abs_bias_matched_xy: abs_xy,
                chosen: pick,
                assumption:
                    "covariate matching is taken to reduce bias relative to no matching \
                     under the maintained sign conditions"
                        .into(),
            });
            chosen = pick;
        } else {
            let v_classic = tables.sv.classic.value.powi(2);
            let v_x = tables.sv.matched_x.value.powi(2);
            let pick = if v_classic <= v_x {
                EstimatorKind::ClassicDid
            } else {
                EstimatorKind::MatchedXY
            };
            path.push(CriterionStep::VarianceCriterion {
                var_full_classic: v_classic,
                var_full_matched_x: v_x,
                chosen: pick,
                assumption:
                    "matching additionally on pre-treatment outcomes never increases variance"
                        .into(),
            });
            chosen = pick;
        }
    }

    let bias_corrected_tau = tables.tau_hat.as_ref().map(|tau| {
        plugin::bias_correct(tau.get(chosen), tables.bias.get(chosen).value)
    });
    if tables.n_tilde_x < tables.n1 || tables.n_tilde_xy < tables.n1 {
        warnings.push(format!(
            "matched estimators use fewer matches than treated units \
             (n1 = {}, matched: {} on covariates, {} with pre-outcomes); \
             outside the 1:1-without-drops convention",
            tables.n1, tables.n_tilde_x, tables.n_tilde_xy
        ));
    }
    Ok(Decision {
        schema_version: REPORT_SCHEMA_VERSION,
        chosen,
        criteria_path: path,
        tables,
        bias_corrected_tau,
        warnings,
    })
}

/// Point estimates and plug-in moments for one panel under the
/// configured matching specs; the building block for both the headline
/// tables and every bootstrap replicate.
struct PanelEvaluation {
    tau: EstimatorTriple<f64>,
    bias: EstimatorTriple<f64>,
    sv: EstimatorTriple<f64>,
    mse: EstimatorTriple<f64>,
    n_tilde_x: usize,
    n_tilde_xy: usize,
    warnings: Vec<String>,
}

fn evaluate_panel(panel: &PanelData, config: &GuidelineConfig) -> Result<PanelEvaluation> {
    let assignment_x = match_panel(panel, &config.spec_for(MatchFeatures::CovariatesOnly))?;
    let assignment_xy =
        match_panel(panel, &config.spec_for(MatchFeatures::CovariatesAndPreOutcomes))?;
    let tau = EstimatorTriple {
        classic: estimate_classic(panel)?.tau_hat,
        matched_x: estimate(panel, EstimatorKind::MatchedX, Some(&assignment_x))?.tau_hat,
        matched_xy: estimate(panel, EstimatorKind::MatchedXY, Some(&assignment_xy))?.tau_hat,
    };
    let report = plugin::estimate_moments(panel)?;
    let n1 = panel.n_treated();
    let n0 = panel.n_control();
    let n_tilde_x = assignment_x.n_matched();
    let n_tilde_xy = assignment_xy.n_matched();
    // Full variances use the realized match counts so caliper drops show
    // up in the reported uncertainty.
    let full = EstimatorTriple::from_fn(|kind| {
        let n_tilde = match kind {
            EstimatorKind::MatchedX => n_tilde_x,
            EstimatorKind::MatchedXY => n_tilde_xy,
            EstimatorKind::ClassicDid => n0,
        };
        report.per_estimator.get(kind).var_core * sample_factor(kind, n1, n0, n_tilde)
    });
    let bias = report.per_estimator.map(|m| m.bias);
    Ok(PanelEvaluation {
        tau,
        bias,
        sv: full.map(f64::sqrt),
        mse: EstimatorTriple::from_fn(|kind| {
            let b = bias.get(kind);
            b * b + full.get(kind)
        }),
        n_tilde_x,
        n_tilde_xy,
        warnings: report.warnings,
    })
}

/// Per-replicate draws of every reported quantity under stratified
/// resampling (units with replacement within treatment group, preserving
/// n1 and n0); the full pipeline (residualization, matching, estimation,
/// plug-in moments) reruns inside each replicate.
#[derive(Debug, Clone)]
pub struct BootstrapDistributions {
    pub tau: EstimatorTriple<Vec<f64>>,
    pub bias: EstimatorTriple<Vec<f64>>,
    pub sv: EstimatorTriple<Vec<f64>>,
    pub mse: EstimatorTriple<Vec<f64>>,
    pub reps: usize,
    pub failures: usize,
}

/// Standard error per quantity: the sample standard deviation across
/// replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapStandardErrors {
    pub tau: EstimatorTriple<f64>,
    pub bias: EstimatorTriple<f64>,
    pub sv: EstimatorTriple<f64>,
    pub mse: EstimatorTriple<f64>,
    pub reps: usize,
    pub failures: usize,
}

impl BootstrapDistributions {
    pub fn standard_errors(&self) -> BootstrapStandardErrors {
        let sd = |v: &Vec<f64>| stats::sample_variance(v).sqrt();
        BootstrapStandardErrors {
            tau: EstimatorTriple {
                classic: sd(&self.tau.classic),
                matched_x: sd(&self.tau.matched_x),
                matched_xy: sd(&self.tau.matched_xy),
            },
            bias: EstimatorTriple {
                classic: sd(&self.bias.classic),
                matched_x: sd(&self.bias.matched_x),
                matched_xy: sd(&self.bias.matched_xy),
            },
            sv: EstimatorTriple {
                classic: sd(&self.sv.classic),
                matched_x: sd(&self.sv.matched_x),
                matched_xy: sd(&self.sv.matched_xy),
            },
            mse: EstimatorTriple {
                classic: sd(&self.mse.classic),
                matched_x: sd(&self.mse.matched_x),
                matched_xy: sd(&self.mse.matched_xy),
            },
            reps: self.reps,
            failures: self.failures,
        }
    }
}

/// Nonparametric bootstrap of the full reporting pipeline. Replicate
/// failures (singular designs and the like) are tolerated up to 1% of
/// the requested replications.
pub fn bootstrap_reports(
    panel: &PanelData,
    config: &GuidelineConfig,
    reps: usize,
    seed: u64,
) -> Result<BootstrapDistributions> {
    if reps == 0 {
        return Err(Error::Config("bootstrap needs at least 1 replication".into()));
    }
    let treated = panel.treated_indices();
    let controls = panel.control_indices();
    let results: Vec<Option<PanelEvaluation>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng_seed(seed, r as u64);
            let mut rows = Vec::with_capacity(panel.n());
            for _ in 0..treated.len() {
                rows.push(treated[rng.gen_range(0..treated.len())]);
            }
            for _ in 0..controls.len() {
                rows.push(controls[rng.gen_range(0..controls.len())]);
            }
            let resampled = panel.select_rows(&rows).ok()?;
            evaluate_panel(&resampled, config).ok()
        })
        .collect();

    let failures = results.iter().filter(|r| r.is_none()).count();
    if failures * 100 > reps {
        return Err(Error::Numerical(format!(
            "bootstrap failure rate too high: {failures} of {reps} replicates failed"
        )));
    }
    let mut dist = BootstrapDistributions {
        tau: EstimatorTriple::from_fn(|_| Vec::with_capacity(reps)),
        bias: EstimatorTriple::from_fn(|_| Vec::with_capacity(reps)),
        sv: EstimatorTriple::from_fn(|_| Vec::with_capacity(reps)),
        mse: EstimatorTriple::from_fn(|_| Vec::with_capacity(reps)),
        reps,
        failures,
    };
    for eval in results.into_iter().flatten() {
        push_triple(&mut dist.tau, &eval.tau);
        push_triple(&mut dist.bias, &eval.bias);
        push_triple(&mut dist.sv, &eval.sv);
        push_triple(&mut dist.mse, &eval.mse);
    }
    Ok(dist)
}

fn push_triple(dst: &mut EstimatorTriple<Vec<f64>>, src: &EstimatorTriple<f64>) {
    dst.classic.push(src.classic);
    dst.matched_x.push(src.matched_x);
    dst.matched_xy.push(src.matched_xy);
}

/// Runs the full guideline on a panel: point estimates, plug-in moments,
/// bootstrap standard errors, then the step-by-step decision.
/// Deterministic given (panel, config): replicate seeds derive from
/// config.seed and aggregation is order-independent.
pub fn decide(panel: &PanelData, config: &GuidelineConfig) -> Result<Decision> {
    config.validate()?;
    let eval = evaluate_panel(panel, config)?;
    let mut warnings = eval.warnings.clone();

    let se = if config.bootstrap_reps > 0 {
        let dist = bootstrap_reports(panel, config, config.bootstrap_reps, config.seed)?;
        if dist.failures > 0 {
            warnings.push(format!(
                "{} of {} bootstrap replicates failed and were dropped",
                dist.failures, dist.reps
            ));
        }
        Some(dist.standard_errors())
    } else {
        None
    };

    let cell = |value: f64, se_value: Option<f64>| Cell {
        value,
        se: se_value,
    };
    let tables = DecisionTables {
        bias: EstimatorTriple::from_fn(|k| {
            cell(eval.bias.get(k), se.as_ref().map(|s| s.bias.get(k)))
        }),
        sv: EstimatorTriple::from_fn(|k| cell(eval.sv.get(k), se.as_ref().map(|s| s.sv.get(k)))),
        mse: EstimatorTriple::from_fn(|k| {
            cell(eval.mse.get(k), se.as_ref().map(|s| s.mse.get(k)))
        }),
        n1: panel.n_treated(),
        n0: panel.n_control(),
        n_tilde_x: eval.n_tilde_x,
        n_tilde_xy: eval.n_tilde_xy,
        tau_hat: Some(eval.tau),
    };
    decide_from_tables(tables, config, warnings)
}
