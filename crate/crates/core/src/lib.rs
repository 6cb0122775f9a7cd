//! Robust synthetic control.
//!
//! The estimator works in two steps. The donor panel is de-noised by hard
//! singular value thresholding (which also imputes missing cells), then a
//! linear synthetic control is learned on the de-noised pre-intervention
//! block and projected forward to obtain the treated unit's counterfactual.
//!
//! Module map:
//!
//! * [`panel`]: panel data, observation mask, bounds transform, CSV I/O.
//! * [`denoise`]: singular value thresholding and the `p̂`, `σ̂²` estimators.
//! * [`learners`]: OLS, ridge and LASSO weights, forward-chaining selection.
//! * [`bayes`]: Gaussian posterior over the weights and predictive variance.
//! * [`aggregate`]: column block-averaging for the consistent estimator.
//! * [`pipeline`]: end-to-end counterfactual estimation and placebo studies.
//! * [`synthgen`]: synthetic latent-variable panels and the benchmark harness.

pub mod aggregate;
pub mod bayes;
pub mod denoise;
mod error;
pub mod learners;
pub mod linalg;
pub mod panel;
pub mod pipeline;
pub mod synthgen;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
