use crate::rng::StreamRng;
use crate::tensor::{ema_update, AdamConfig, ConvNetSpec, Grads, Graph, ParamStore, Real, Tensor, Var};
use crate::Result;

/// A network with live weights (trained) and EMA weights (used to sample).
#[derive(Debug, Clone)]
pub struct Net<T> {
    pub spec: ConvNetSpec,
    pub params: ParamStore<T>,
    pub ema: ParamStore<T>,
}

impl<T: Real> Net<T> {
    pub fn new(spec: ConvNetSpec, seed: u64, zero_head: bool) -> Result<Self> {
        let params = spec.init(seed, zero_head)?;
        Ok(Self { spec, ema: params.clone(), params })
    }

    /// Record a training forward pass with live weights.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        input: Var,
        sigma: Option<&[f64]>,
        dropout: Option<&mut StreamRng>,
    ) -> Result<Var> {
        self.spec.forward(g, &self.params, prefix, input, sigma, dropout)
    }

    /// Inference with EMA weights.
    pub fn apply(&self, input: &Tensor<T>, sigma: Option<&[f64]>) -> Result<Tensor<T>> {
        self.spec.apply(&self.ema, input, sigma)
    }

    /// Pull gradients for `prefix`, take an Adam step, then refresh the EMA.
    /// Returns the squared gradient norm.
    pub fn update(&mut self, g: &Graph<T>, grads: &Grads<T>, prefix: &str, adam: &AdamConfig, ema_rate: f64) -> Result<f64> {
        self.params.set_grads(g, grads, prefix);
        let gn = self.params.grad_norm();
        self.params.adam_step(adam)?;
        ema_update(&mut self.ema, &self.params, ema_rate)?;
        Ok(gn * gn)
    }
}
