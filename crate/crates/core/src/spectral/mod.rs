//! Pseudo-spectral simulator for the coupled two-field Kolmogorov flow.
//!
//! The high-resolution vorticity `zeta_h` is driven by `F cos(m x)`; the
//! low-resolution field `zeta_l` is unforced, strongly hyperviscous and nudged
//! towards `zeta_h` with time scale `tau`. Larger `tau` means a looser coupling
//! and a larger misalignment between the two fields.
//!
//! Nonlinear, forcing, nudging and Rayleigh terms are advanced with third
//! order Adams-Bashforth; hyperviscosity is applied with backward Euler per
//! spectral mode. A 2/3 dealiasing mask is applied every step.

mod config;
mod fft;
mod spectrum;
mod stepper;
mod trajectory;
mod workspace;

pub use config::{Physics, SimConfig};
pub use fft::Fft2;
pub use spectrum::{radial_power_spectrum, SpectrumBin};
pub use stepper::{
    ab_coefficients, initial_condition, step, AbHistory, Simulator, VorticityState,
};
pub use trajectory::{
    read_trajectory, run_trajectory, sha256_file, write_trajectory, SimManifest, Snapshot,
    Trajectory, SIM_FORMAT_VERSION,
};
pub use workspace::SpectralWorkspace;
