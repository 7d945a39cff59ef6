//! Matching-before-DiD estimators under a linear structural model with
//! latent time-varying confounding: closed-form bias/variance/MSE
//! oracles, plug-in estimation from observed panels, Monte Carlo
//! verification, and the match-or-not decision guideline.

pub mod decision;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod io;
pub mod matching;
pub mod oracle;
pub mod panel;
pub mod plugin;
pub mod report;
pub mod stats;

pub use error::{Error, Result};

/// Version tag embedded in every serialized report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;
