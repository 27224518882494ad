//! Early-fusion RGB-thermal segmentation as a small verifiable numerical library.
//!
//! - [`Tensor`] and [`Graph`]: dense storage and reverse-mode autodiff.
//! - [`dbtc`]: density-peaks token clustering over a semantic plus spatial metric.
//! - [`mif`]: windowed cross-modal interaction with statistics-driven channel gating.
//! - [`mfad`]: multi-scale aggregation and Euclidean class-token decoding.
//! - [`pipeline`]: the four-stage model, its ablation baselines and checkpoints.

pub mod dbtc;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mfad;
pub mod mif;
pub mod nn;
pub mod ops;
pub mod pipeline;
pub mod real;
pub mod serialize;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
