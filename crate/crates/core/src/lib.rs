//! Causal effects of a binary exposure on a binary outcome that is missing
//! not at random, in left-truncated right-censored cohorts.
//!
//! The numerical core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases at the crate root fix it to `f64`.

pub mod ate;
pub mod bootstrap;
pub mod cohort;
pub mod error;
pub mod fixture;
mod iterate;
pub mod linalg;
pub mod propensity;
pub mod report;
pub mod scalar;
pub mod sensitivity;
pub mod simulate;
pub mod strata;
pub mod survival;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Cohort = cohort::Cohort<f64>;
pub type SubjectRecord = cohort::SubjectRecord<f64>;
pub type HazardGrid = survival::HazardGrid<f64>;
pub type WeightVector = propensity::WeightVector<f64>;
pub type AteTheta = ate::AteTheta<f64>;
pub type AteFit = ate::AteFit<f64>;
pub type PeTheta = strata::PeTheta<f64>;
pub type PeFit = strata::PeFit<f64>;

pub type Cohort32 = cohort::Cohort<f32>;
pub type HazardGrid32 = survival::HazardGrid<f32>;
pub type AteFit32 = ate::AteFit<f32>;
