//! Monte-Carlo laboratory: data generation, replicated experiments, metrics,
//! normality diagnostics, and sampling checks of the population identities.

pub mod config;
pub mod dgp;
pub mod diagnostics;
pub mod experiment;
pub mod rng;
pub mod stein;

pub use config::{CoefScheme, CovSpec, DesignKind, MeanSpec, SimConfig, SimEstimand, TrueParams};
pub use dgp::{generate, Population, Truth};
pub use diagnostics::{metrics, normality_diagnostics, Metrics, QqData};
pub use experiment::{run_experiment, ReplicateRecord, SimResult, SummaryRow, MU_UNKNOWN_SUFFIX};
pub use stein::{
    diagnostic_identities, oracle_point, registered_identities, run_oracle_suite, stein_oracle_check, Family,
    OraclePoint, OracleReport,
};
