//! Multilevel multiple imputation.
//!
//! Missing values in two-level data are imputed with a Gibbs sampler for the
//! multivariate linear mixed-effects model. Each completed dataset is then
//! analysed with a linear mixed model fitted by ML or REML, and the results
//! are pooled with Rubin's rules or one of the multiparameter tests D1, D2
//! and D3.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod formula;
pub mod gibbs;
pub mod linalg;
pub mod lmm;
mod optim;
pub mod pooling;
pub mod synthetic;
pub mod transforms;

pub use data::{load_dataset, Column, Dataset, LoadOptions};
pub use error::{Error, Result};
pub use formula::{build_design, parse_formula, DesignMatrices, ModelFormula};
pub use gibbs::{run_chains, run_imputation, ChainStore, ImputationMode, ImputationResult, ImputationSpec, Prior};
pub use lmm::{fit_lmm, icc, loglik_at, AnalysisModel, LmmFit, Method};
pub use pooling::{pool_chisq_d2, pool_constraints, pool_estimates, pool_lrt_d3, DTestResult, Estimates, PooledEstimates};
pub use synthetic::{ampute, generate_two_level, pirls_like, TwoLevelSpec};
