//! Propensity-score nearest-neighbor matching estimation of the average
//! treatment effect, with a number of matches `M` that grows with the sample.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the simulation driver and CLI use.
//!
//! Pipeline: [`data::load_dataset`] → [`propensity::fit_mle`] →
//! [`matching::ScoreIndex`] → [`estimator::match_fit`] →
//! [`variance::VariancePrep::estimate`].

pub mod cli;
pub mod data;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod matching;
pub mod normal;
pub mod oracle;
pub mod propensity;
pub mod scalar;
pub mod simulation;
pub mod variance;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Observation = data::Observation<f64>;
pub type PropensityFit = propensity::PropensityFit<f64>;
pub type ScoreIndex = matching::ScoreIndex<f64>;
pub type ScoreIndex32 = matching::ScoreIndex<f32>;
pub type AteEstimate = estimator::AteEstimate<f64>;
pub type VarianceComponents = variance::VarianceComponents<f64>;
pub type TuningRule = variance::TuningRule<f64>;
pub type Matrix = linalg::Matrix<f64>;
