//! Attribution-driven study design for survival models.
//!
//! A flexible exploratory model (a random survival forest) is explained with
//! Shapley attributions on two extreme-risk cohorts. The attribution clouds are
//! turned into three kinds of design recommendations for a transparent Cox
//! model: drop a feature, add a quadratic term, add a pairwise interaction.
//! The augmented Cox models are then scored against the baseline on held-out
//! data.
//!
//! Module map:
//!
//! - [`data`]: CSV ingestion, feature encoding, train/test splits
//! - [`stats`]: Pearson correlation, Wilcoxon rank-sum, percentile bootstrap
//! - [`cox`]: design matrices, partial-likelihood Newton solver, Breslow baseline
//! - [`forest`]: random survival forest with log-rank splits
//! - [`attribution`]: exact and Kernel SHAP attributions against a reference point
//! - [`recommender`]: cohort selection and the three recommendation rules
//! - [`evaluation`]: C-index, calibration, paired model comparison
//! - [`synth`]: proportional-hazards simulator with planted structure
//! - [`pipeline`] and [`report`]: end-to-end orchestration and artifact emission

pub mod attribution;
pub mod cox;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod forest;
pub mod pipeline;
pub mod recommender;
pub mod report;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
