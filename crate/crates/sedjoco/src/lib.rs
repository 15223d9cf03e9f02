pub mod banded;
pub mod covariance;
pub mod error;
pub mod harness;
pub mod model;
pub mod perturbation;
pub mod solver;
pub mod sourcegen;
pub mod spectral;
