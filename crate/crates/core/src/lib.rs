//! Toy-scale rectified-flow laboratory.
//!
//! Trains conditional flow-matching velocity fields on small labelled 2-D
//! distributions, samples them under several guidance rules (plain
//! conditional, classifier-free guidance, the predictor–corrector
//! Rectified-CFG++ rule, APG and CFG-Zero*), and checks the stability bounds
//! that the predictor–corrector rule satisfies.

pub mod cli;
pub mod datasets;
pub mod error;
pub mod field;
pub mod guidance;
pub mod model;
pub mod numerics;
pub mod plot;
pub mod report;
pub mod sampler;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use field::{Condition, CountingField, VelocityField};
