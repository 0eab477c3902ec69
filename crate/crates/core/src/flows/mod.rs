//! Downscaling schemes: stochastic flow matching (SFM) and the CFM, CDM,
//! CorrDiff and regression baselines, behind one [`Downscaler`] interface.
//!
//! All schemes work on per-channel standardized fields and predict the clean
//! target directly ("x-prediction") from a noisy input and its noise level.

mod baselines;
mod config;
mod model;
mod net;
mod noise;
mod run;
mod sampler;
mod sfm;

pub use baselines::{Cdm, Cfm, CorrDiff, Regression, VeDiffusion};
pub use config::{EncoderKind, NetworkConfig, Scheme, SchemeConfig, TrainRecord};
pub use model::Downscaler;
pub use net::Net;
pub use noise::{
    edm_sigma_grid, interpolant, lognormal_draws, normal_per_sample, normal_tensor, purpose, sigma_floor,
    uniform_draws, AdaptiveNoiseState, PerturbationBatch,
};
pub use run::{
    load_run, sample_cases, sample_stream, train_run, RunManifest, TrainConfig, RUN_FORMAT_VERSION,
};
pub use sampler::{edm_euler, flow_euler};
pub use sfm::{Encoder, Sfm, SfmLoss};

use crate::tensor::Real;
use crate::Result;

/// Build an untrained model for `cfg.scheme`.
pub fn build_model<T: Real>(
    cfg: &SchemeConfig,
    in_channels: usize,
    out_channels: usize,
    seed: u64,
) -> Result<Box<dyn Downscaler<T>>> {
    Ok(match cfg.scheme {
        Scheme::Sfm => Box::new(Sfm::new(cfg, in_channels, out_channels, seed)?),
        Scheme::Cfm => Box::new(Cfm::new(cfg, in_channels, out_channels, seed)?),
        Scheme::Cdm => Box::new(Cdm::new(cfg, in_channels, out_channels, seed)?),
        Scheme::CorrDiff => Box::new(CorrDiff::new(cfg, in_channels, out_channels, seed)?),
        Scheme::Regression => Box::new(Regression::new(cfg, in_channels, out_channels, seed)?),
    })
}
