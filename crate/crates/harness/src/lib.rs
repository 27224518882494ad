//! Synthetic data, training, evaluation, verification and benchmarks around `efnet-core`.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod netpbm;
pub mod optim;
pub mod train;
pub mod verify;

pub use error::{HarnessError, Result};
