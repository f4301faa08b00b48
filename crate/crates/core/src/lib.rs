//! Distributed expectation propagation for multi-sensor multi-object tracking.
//!
//! Sensors observe a fixed set of targets through a non-homogeneous Poisson
//! measurement model with clutter. Each sensor runs a Rao-Blackwellised Gibbs
//! sampler on its own data, and sensors share Gaussian site approximations
//! over a simulated network. A centralised Gibbs tracker, GOSPA scoring and a
//! Monte Carlo experiment runner are included for comparison.

pub mod baseline;
pub mod cli;
pub mod ep;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod gibbs;
pub mod metrics;
pub mod model;
pub mod network;
pub mod rng;

pub use error::{Error, Result};
