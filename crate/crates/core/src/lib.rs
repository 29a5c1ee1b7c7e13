//! Distribution system state estimation under limited observability.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod linalg;
pub mod measurement;
pub mod neural;
pub mod pipelines;
pub mod powerflow;
pub mod rng;
pub mod wls;

pub use error::{Error, Result};
