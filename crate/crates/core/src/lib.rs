//! Method-of-moments estimation for high-dimensional GLM functionals and
//! doubly-robust observational-study estimands under Gaussian designs.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod gauss_link_moments;
pub mod link;
pub mod moment_systems;
pub mod quadrature;
pub mod selftest;
pub mod simlab;
pub mod ustat;

pub use error::{Error, Result};
pub use gauss_link_moments::{eval_bivariate, eval_fk, eval_fk_grad, BivariateIndexLaw, IndexLaw};
pub use link::LinkSpec;
pub use ustat::{collect_moments, Dataset, DesignModel, Estimand, MomentKey, MomentSet, SigmaMode};
