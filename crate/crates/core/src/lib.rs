//! Stochastic flow matching (SFM) for super-resolving misaligned physics data.
//!
//! The crate is organised the way the pipeline runs:
//!
//! - [`spectral`]: pseudo-spectral simulator for a coupled pair of Kolmogorov
//!   flows (a nudged low-resolution field and a forced high-resolution one),
//!   plus radial power spectra.
//! - [`data`]: turns simulator trajectories into normalized `(y, x)` splits and
//!   streams minibatches.
//! - [`tensor`]: small reverse-mode autodiff engine with periodic convolutions,
//!   Adam and weight EMA.
//! - [`flows`]: SFM joint encoder/denoiser training and sampling, and the
//!   CFM, CDM, CorrDiff and regression baselines behind one interface.
//! - [`metrics`]: RMSE, MAE, CRPS, spread-skill ratio and skill reports.

pub mod data;
pub mod error;
pub mod flows;
pub mod metrics;
pub mod npy;
pub mod rng;
pub mod spectral;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Real, Tensor};
