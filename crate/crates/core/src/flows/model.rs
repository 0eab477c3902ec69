use crate::data::Batch;
use crate::rng::StreamRng;
use crate::tensor::{Real, Tensor};
use crate::Result;

use super::config::{Scheme, TrainRecord};
use super::net::Net;

/// Common interface of the five downscaling schemes.
pub trait Downscaler<T: Real>: Send + Sync {
    fn scheme(&self) -> Scheme;

    /// One optimizer step on a normalized batch. Draws are keyed by `step`.
    fn train_step(&mut self, batch: &Batch<T>, step: u64) -> Result<TrainRecord>;

    /// One output per row of `y`; row `b` takes its noise from `rngs[b]`.
    fn sample(&self, y: &Tensor<T>, rngs: &mut [StreamRng]) -> Result<Tensor<T>>;

    /// Called before each training step with the full training split.
    fn on_step_start(&mut self, _step: u64, _total_steps: u64, _train: &Batch<T>) -> Result<()> {
        Ok(())
    }

    /// Cheap held-out diagnostic: RMSE of the model's deterministic part
    /// (encoder or regression mean) on a normalized batch, if it has one.
    fn validation_rmse(&self, _batch: &Batch<T>) -> Option<Result<f64>> {
        None
    }

    /// Named networks, for checkpointing.
    fn networks(&self) -> Vec<(&'static str, &Net<T>)>;

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Net<T>)>;

    /// Scalar state that is not a network weight (noise scale, stage, ...).
    fn state(&self) -> serde_json::Value;

    fn set_state(&mut self, state: &serde_json::Value) -> Result<()>;
}
