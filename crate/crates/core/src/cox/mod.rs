//! The transparent model: design expansion, partial-likelihood fitting and
//! survival prediction.
//!
//! Every design column is z-scored with training statistics before fitting, so
//! coefficients are per standard deviation. The statistics travel with the fit
//! and are reapplied when scoring new rows.

mod design;
mod fit;

pub use design::{build_design, ordered_pair, DesignMatrix, ModelPlan, Standardization, Term, TermKind};
pub use fit::{
    fit_cox, linear_predictor, partial_likelihood, survival_at, CoxFit, CoxOptions, LikelihoodEval,
    SurvivalEstimate, Ties,
};
