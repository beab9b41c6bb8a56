pub mod config;
pub mod diffmath;
pub mod distributions;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod selftest;
pub mod simulator;
pub mod training;
mod error;

pub use error::{Error, Result};
