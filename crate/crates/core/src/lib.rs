//! Structural model of a revenue-driven recommender facing utility-maximizing
//! users, with a panel simulator, the estimators that recover the influence
//! parameter θ, moment-based calibration and counterfactual feed policies.

pub mod behavior;
pub mod calibration;
pub mod cli;
pub mod config;
pub mod counterfactual;
pub mod error;
pub mod estimation;
pub mod measurement;
pub mod recommender;
pub mod rng;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
