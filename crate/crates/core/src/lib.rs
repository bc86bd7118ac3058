//! Random walks in random environments on the strip `Z x {1, ..., m}`.
//!
//! The crate samples layered environments, computes the matrix recursion
//! that governs hitting probabilities, simulates quenched walks, and checks
//! the resulting fluctuations against stable, Gaussian and Kesten-Sinai
//! reference laws.

pub mod cli;
pub mod config;
pub mod environment;
pub mod error;
pub mod harness;
pub mod limitlaws;
pub mod linalg;
pub mod par;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod walker;

pub use environment::{
    sample_environment, validate_triple, EllipticityParams, Environment, EnvironmentSpec, MatrixTriple, Window,
};
pub use error::{Error, Result};
