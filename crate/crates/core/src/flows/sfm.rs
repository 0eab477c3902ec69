use serde::{Deserialize, Serialize};

use super::config::{EncoderKind, Scheme, SchemeConfig, TrainRecord};
use super::model::Downscaler;
use super::net::Net;
use super::noise::{self, purpose, AdaptiveNoiseState};
use super::sampler::flow_euler;
use crate::data::Batch;
use crate::rng::{self, StreamRng};
use crate::tensor::{ConvNetSpec, Graph, Real, Tensor, Var};
use crate::{Error, Result};

pub(crate) const ENCODER_SEED_SALT: u64 = 0x454e_434f_4445_5221;

/// The conditional base-distribution mean `E(y)`.
#[derive(Debug, Clone)]
pub enum Encoder<T> {
    Zero { out_channels: usize },
    Net(Net<T>),
}

impl<T: Real> Encoder<T> {
    pub fn build(kind: EncoderKind, cfg: &SchemeConfig, in_c: usize, out_c: usize, seed: u64) -> Result<Self> {
        let spec = match kind {
            EncoderKind::Zero => return Ok(Encoder::Zero { out_channels: out_c }),
            EncoderKind::Conv1x1 => ConvNetSpec::pointwise(in_c, out_c),
            EncoderKind::Convnet => ConvNetSpec {
                in_channels: in_c,
                out_channels: out_c,
                hidden_channels: cfg.network.hidden_channels,
                n_blocks: cfg.network.n_blocks,
                kernel_size: cfg.network.kernel_size,
                use_sigma_embedding: false,
                use_positional_channels: cfg.network.positional_channels,
                dropout: cfg.network.dropout,
            },
        };
        Ok(Encoder::Net(Net::new(spec, seed ^ ENCODER_SEED_SALT, false)?))
    }

    fn zeros_like(out_channels: usize, y: &Tensor<T>) -> Tensor<T> {
        let mut shape = y.shape().to_vec();
        shape[1] = out_channels;
        Tensor::zeros(&shape)
    }

    /// Inference with EMA weights.
    pub fn apply(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Encoder::Zero { out_channels } => Ok(Self::zeros_like(*out_channels, y)),
            Encoder::Net(n) => n.apply(y, None),
        }
    }

    fn forward(&self, g: &mut Graph<T>, y: Var, dropout: &mut StreamRng) -> Result<Var> {
        match self {
            Encoder::Zero { out_channels } => {
                let z = Self::zeros_like(*out_channels, g.value(y));
                Ok(g.constant(z))
            }
            Encoder::Net(n) => n.forward(g, "enc/", y, None, Some(dropout)),
        }
    }
}

/// Scalars of the SFM objective as recorded in the graph.
#[derive(Debug, Clone, Copy)]
pub struct SfmLoss {
    pub loss: Var,
    pub denoise: Var,
    /// Mean squared normalized residual `e` (before the lambda weight).
    pub reg: Var,
    pub residual_rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SfmState {
    noise: AdaptiveNoiseState,
}

/// Stochastic flow matching: a jointly trained encoder `E` and denoiser `D`.
#[derive(Debug, Clone)]
pub struct Sfm<T> {
    cfg: SchemeConfig,
    seed: u64,
    pub encoder: Encoder<T>,
    pub denoiser: Net<T>,
    pub noise: AdaptiveNoiseState,
}

impl<T: Real> Sfm<T> {
    pub fn new(cfg: &SchemeConfig, in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        if cfg.scheme != Scheme::Sfm {
            return Err(Error::Config(format!("SFM model built from a {} config", cfg.scheme)));
        }
        let encoder = Encoder::build(cfg.encoder_kind, &cfg, in_channels, out_channels, seed)?;
        let cond = if cfg.condition_on_y() { in_channels } else { 0 };
        let spec = ConvNetSpec {
            in_channels: out_channels + cond,
            out_channels,
            hidden_channels: cfg.network.hidden_channels,
            n_blocks: cfg.network.n_blocks.max(1),
            kernel_size: cfg.network.kernel_size,
            use_sigma_embedding: true,
            use_positional_channels: cfg.network.positional_channels,
            dropout: cfg.network.dropout,
        };
        let denoiser = Net::new(spec, seed, true)?;
        let noise = AdaptiveNoiseState::new(cfg.sigma_z_init, cfg.beta, cfg.adaptive_sigma)?;
        Ok(Self { cfg, seed, encoder, denoiser, noise })
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.cfg
    }

    /// Change the number of sampler steps of a trained model.
    pub fn set_sampling_steps(&mut self, n_steps: usize) {
        self.cfg.n_steps = n_steps;
    }

    /// Noise levels drawn for `step`, uniform on `[floor, sigma_z)`.
    pub fn draw_sigmas(&self, step: u64, b: usize) -> Vec<f64> {
        let sz = self.noise.sigma_z;
        noise::uniform_draws(self.seed, purpose::SIGMA, step, b, noise::sigma_floor(sz), sz)
    }

    /// Record the SFM objective for `batch` on `g` using the live weights.
    pub fn loss_graph(&self, g: &mut Graph<T>, batch: &Batch<T>, step: u64) -> Result<SfmLoss> {
        let b = batch.len();
        let sz = self.noise.sigma_z;
        let yv = g.constant(batch.y.clone());
        let xv = g.constant(batch.x.clone());
        let mut enc_drop = rng::stream(self.seed, purpose::DROPOUT_ENCODER, step);
        let ey = self.encoder.forward(g, yv, &mut enc_drop)?;
        if g.shape(ey) != batch.x.shape() {
            return Err(Error::Shape(format!("encoder output {:?} vs target {:?}", g.shape(ey), batch.x.shape())));
        }
        let resid = g.sub(ey, xv)?;
        let residual_rmse = g.value(resid).mean_square().sqrt();
        // sigma_z enters as a constant: no gradient flows into it.
        let e = g.scale(resid, 1.0 / sz)?;
        let sigmas = self.draw_sigmas(step, b);
        let eps = g.constant(noise::normal_tensor(self.seed, purpose::EPS, step, batch.x.shape()));
        let e_eps = g.add(e, eps)?;
        let kick = g.scale_per_sample(e_eps, &sigmas)?;
        let x_sigma = g.add(xv, kick)?;
        let input = if self.cfg.condition_on_y() { g.concat_channels(&[x_sigma, yv])? } else { x_sigma };
        let mut den_drop = rng::stream(self.seed, purpose::DROPOUT_DENOISER, step);
        let d = self.denoiser.forward(g, "den/", input, Some(&sigmas), Some(&mut den_drop))?;
        let err = g.sub(d, xv)?;
        let weights: Vec<f64> = sigmas.iter().map(|s| (sz / s).powi(2)).collect();
        let denoise = g.weighted_mean_square(err, &weights)?;
        let reg = g.mean_square(e)?;
        let loss = g.axpby(1.0, denoise, self.cfg.lambda(), reg)?;
        Ok(SfmLoss { loss, denoise, reg, residual_rmse })
    }

    /// Latent `z = E(y) + sigma_z eps`.
    pub fn latent(&self, y: &Tensor<T>, rngs: &mut [StreamRng]) -> Result<Tensor<T>> {
        let ey = self.encoder.apply(y)?;
        let eps: Tensor<T> = noise::normal_per_sample(rngs, &ey.shape()[1..]);
        let sz = T::from_f64(self.noise.sigma_z);
        ey.zip_map(&eps, |a, n| a + sz * n)
    }

    /// Integrate from a given latent.
    pub fn sample_from(&self, z: Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let b = y.shape()[0];
        let sz = self.noise.sigma_z;
        let cond = self.cfg.condition_on_y();
        flow_euler(z, self.cfg.n_steps, |x, t| {
            let sig = vec![(1.0 - t) * sz; b];
            if cond {
                self.denoiser.apply(&Tensor::concat_channels(&[x, y])?, Some(&sig))
            } else {
                self.denoiser.apply(x, Some(&sig))
            }
        })
    }
}

impl<T: Real> Downscaler<T> for Sfm<T> {
    fn scheme(&self) -> Scheme {
        Scheme::Sfm
    }

    fn train_step(&mut self, batch: &Batch<T>, step: u64) -> Result<TrainRecord> {
        let mut g = Graph::new();
        let l = self.loss_graph(&mut g, batch, step)?;
        let lambda = self.cfg.lambda();
        let mut rec = TrainRecord {
            step,
            loss: g.value(l.loss).item().as_f64(),
            denoise_loss: g.value(l.denoise).item().as_f64(),
            reg_loss: lambda * g.value(l.reg).item().as_f64(),
            sigma_z: self.noise.sigma_z,
            grad_norm: f64::NAN,
            residual_rmse: l.residual_rmse,
        };
        if !rec.loss.is_finite() {
            return Err(Error::NonFinite(format!("SFM loss at step {step}: {}", rec.csv_row())));
        }
        let grads = g.backward(l.loss)?;
        let (adam, ema) = (self.cfg.adam, self.cfg.ema_rate);
        let mut gn2 = self.denoiser.update(&g, &grads, "den/", &adam, ema)?;
        if let Encoder::Net(enc) = &mut self.encoder {
            gn2 += enc.update(&g, &grads, "enc/", &adam, ema)?;
        }
        self.noise.update(l.residual_rmse);
        rec.grad_norm = gn2.sqrt();
        rec.sigma_z = self.noise.sigma_z;
        Ok(rec)
    }

    fn sample(&self, y: &Tensor<T>, rngs: &mut [StreamRng]) -> Result<Tensor<T>> {
        if rngs.len() != y.shape()[0] {
            return Err(Error::Shape(format!("{} generators for {} inputs", rngs.len(), y.shape()[0])));
        }
        let z = self.latent(y, rngs)?;
        self.sample_from(z, y)
    }

    fn validation_rmse(&self, batch: &Batch<T>) -> Option<Result<f64>> {
        Some(self.encoder.apply(&batch.y).and_then(|e| Ok(e.zip_map(&batch.x, |a, b| a - b)?.mean_square().sqrt())))
    }

    fn networks(&self) -> Vec<(&'static str, &Net<T>)> {
        let mut v = vec![("denoiser", &self.denoiser)];
        if let Encoder::Net(n) = &self.encoder {
            v.push(("encoder", n));
        }
        v
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Net<T>)> {
        let mut v = vec![("denoiser", &mut self.denoiser)];
        if let Encoder::Net(n) = &mut self.encoder {
            v.push(("encoder", n));
        }
        v
    }

    fn state(&self) -> serde_json::Value {
        serde_json::to_value(SfmState { noise: self.noise }).expect("plain data")
    }

    fn set_state(&mut self, state: &serde_json::Value) -> Result<()> {
        let s: SfmState = serde_json::from_value(state.clone())?;
        self.noise = s.noise;
        Ok(())
    }
}
