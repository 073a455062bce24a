//! Toeplitz neural networks on the CPU.
//!
//! Token mixing is a per-channel Toeplitz matrix–vector product whose
//! coefficients come from a small relative position encoder, damped by an
//! exponential decay `lambda^|i-j|`. Products run in `O(n log n)` through a
//! circulant embedding and FFTs.

pub mod check;
pub mod config;
pub mod data;
pub mod driver;
pub mod equivalence;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod rpe;
pub mod scalar;
pub mod tno;
pub mod toeplitz;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{ModelConfig, TnnModel};
pub use params::Parameters;
pub use rpe::{InputMode, RpeConfig, RpeNet};
pub use scalar::{Precision, Real};
pub use tno::ToeplitzOperator;
pub use toeplitz::{CirculantStrategy, RelPosCoefficients};
