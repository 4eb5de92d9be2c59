//! Matching-adjusted indirect comparison of two trials.
//!
//! Individual patient data (IPD) from one trial are reweighted to match the
//! covariate summaries published by a second trial (AGD), and the two are
//! contrasted through their arms. See the crate README for a walkthrough.

pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
mod linalg;
pub mod simulation;
pub mod variance;
pub mod weighting;

pub use error::{MaicError, Result};
