//! Convolutional encoder/decoder "transform model" that maps numerical-model
//! ocean velocity fields toward observations, and applies the learned
//! correction outside the observation window, forward or backward in time.

pub mod error;
pub mod field;
pub mod nn;
pub mod stunet;
pub mod pipeline;
pub mod metrics;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
