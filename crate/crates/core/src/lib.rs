//! Logistic regression on record-linked data with false-positive links.
//!
//! The crate simulates linked files with a clerical-review sample, fits the
//! clerical-review estimating equation and the optimal two-step
//! quasi-likelihood estimator, audits the score identity, and runs Monte
//! Carlo comparisons of the estimators. The `linkreg` binary wraps the same
//! functionality for scripting.
//!
//! A narrative guide lives in the `book/` directory of the repository; its
//! code listings are compiled and run as doctests of this crate.

pub mod error;
pub mod estimators;
pub mod formats;
pub mod harness;
pub mod inference;
pub mod json;
pub mod linkage_sim;
pub mod match_prob;
pub mod model_core;
pub mod stats;

pub use error::{Error, Result};
pub use estimators::{EstimatorKind, TableSource, TwoStepOptions};
pub use linkage_sim::{
    analysis_view, generate, CovariateLevel, LinkedDataset, LinkedRecord, MatchModel,
    MismatchModel, ScenarioConfig,
};
pub use match_prob::{FallbackPolicy, MatchProbTable, Provenance};
pub use model_core::{Coefficients, Covariates, FitResult, SolverOptions};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data-model.md")]
    mod data_model {}
    #[doc = include_str!("../../../book/src/estimating-equations.md")]
    mod estimating_equations {}
    #[doc = include_str!("../../../book/src/match-probabilities.md")]
    mod match_probabilities {}
    #[doc = include_str!("../../../book/src/optimal.md")]
    mod optimal {}
    #[doc = include_str!("../../../book/src/score-identity.md")]
    mod score_identity {}
    #[doc = include_str!("../../../book/src/sandwich.md")]
    mod sandwich {}
    #[doc = include_str!("../../../book/src/monte-carlo.md")]
    mod monte_carlo {}
    #[doc = include_str!("../../../book/src/cli-and-formats.md")]
    mod cli_and_formats {}
}
