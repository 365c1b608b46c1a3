//! Structural estimation of partially observable Markov decision processes
//! from action/observation histories.

pub mod bellman;
pub mod engine;
pub mod error;
pub mod estimator;
pub mod family;
pub mod grid;
pub mod likelihood;
pub mod model;
pub mod sensitivity;

pub use error::{Error, Result};
