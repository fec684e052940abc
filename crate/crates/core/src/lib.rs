//! Regression for the conditional relative risk or risk difference of a
//! binary exposure on a binary outcome, with the log odds product as a
//! variation-independent nuisance parameter.
//!
//! Estimation is by maximum likelihood or by doubly-robust estimating
//! equations that also use a logistic propensity score model.

#![allow(clippy::needless_range_loop)]

pub mod design;
pub mod dr;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod mle;
pub mod param_map;
pub mod propensity;
pub mod simulation;
pub mod variance;

pub use design::{build_design, load_csv, Covariates, Dataset, DesignMatrix, DesignSpec};
pub use dr::{solve_dr, DrFit, WeightKind};
pub use error::{Error, Result};
pub use estimator::{analyze, AnalysisSpec, EstimatorKind, VarianceMethod};
pub use mle::{fit_mle, FitOptions, NuisanceFit, NuisanceForm, OutcomeModelSpec};
pub use param_map::TargetMeasure;
pub use propensity::{fit_propensity, PropensityFit};
