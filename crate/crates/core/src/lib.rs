pub mod campaign;
pub mod detection;
pub mod detector;
pub mod error;
pub mod failure_oracle;
pub mod geometry;
pub mod objectives;
pub mod perturbation;
pub mod search;
pub mod stats;

pub use error::{Error, Result};
