//! Differentially private robust estimation by propose-test-release over a
//! discretized exponential mechanism, with exact and certified safety margins.

pub mod data;
pub mod datagen;
pub mod hptr;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mechanisms;
pub mod net;
pub mod resilience;
pub mod robust1d;
pub mod scores;

pub use data::{Dataset, Provenance};
pub use error::{HptrError, Result};
