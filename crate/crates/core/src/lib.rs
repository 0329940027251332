//! Sequential Monte Carlo and Hamiltonian samplers for characterizing qubit
//! dynamics, with adaptive experiment design and a simulated device.

pub mod design;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod models;
pub mod rng;
pub mod smc;
pub mod subsampling;

pub use ensemble::{ModeMetrics, ModeThresholds, Moments, WeightedEnsemble};
pub use error::{Error, Result};
pub use models::{Controls, Datum, DomainBox, ModelKind, ModelSpec, ParameterPoint};
