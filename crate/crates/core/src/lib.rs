//! Spatial prisoner's dilemma with inherited friendliness, and a testbed of
//! traffic signal controllers.

pub mod error;
pub mod evolution;
pub mod experiments;
pub mod game;
pub mod metrics;
pub mod traffic;
pub mod world;

pub use error::{Error, Result};
