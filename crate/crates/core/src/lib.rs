//! Simulation and verification laboratory for federated averaging with a
//! constant step size.
//!
//! The crate runs FedAvg, SCAFFOLD and Richardson-Romberg extrapolated
//! FedAvg on synthetic client populations, and compares the long-run
//! behaviour of the iterates with closed-form and first-order predictions
//! of their bias and covariance.

pub mod analysis_det;
pub mod analysis_sto;
pub mod datasets;
pub mod error;
pub mod fedavg;
pub mod linalg;
pub mod problems;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, DenseVector, SymTensor3};
pub use problems::{Family, NoiseModel, Problem};
