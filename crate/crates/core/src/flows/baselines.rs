//! Baselines sharing the SFM interface: conditional flow matching, a
//! conditional variance-exploding diffusion model, plain regression and the
//! two-stage regression + residual diffusion model.

use serde::{Deserialize, Serialize};

use super::config::{Scheme, SchemeConfig, TrainRecord};
use super::model::Downscaler;
use super::net::Net;
use super::noise::{self, edm_sigma_grid, purpose};
use super::sampler::{edm_euler, flow_euler};
use crate::data::Batch;
use crate::rng::{self, StreamRng};
use crate::tensor::{ConvNetSpec, Graph, Real, Tensor};
use crate::{Error, Result};

fn denoiser_spec(cfg: &SchemeConfig, in_c: usize, out_c: usize) -> ConvNetSpec {
    ConvNetSpec {
        in_channels: out_c + in_c,
        out_channels: out_c,
        hidden_channels: cfg.network.hidden_channels,
        n_blocks: cfg.network.n_blocks.max(1),
        kernel_size: cfg.network.kernel_size,
        use_sigma_embedding: true,
        use_positional_channels: cfg.network.positional_channels,
        dropout: cfg.network.dropout,
    }
}

fn regression_spec(cfg: &SchemeConfig, in_c: usize, out_c: usize) -> ConvNetSpec {
    ConvNetSpec {
        in_channels: in_c,
        out_channels: out_c,
        hidden_channels: cfg.network.hidden_channels,
        n_blocks: cfg.network.n_blocks,
        kernel_size: cfg.network.kernel_size,
        use_sigma_embedding: false,
        use_positional_channels: cfg.network.positional_channels,
        dropout: cfg.network.dropout,
    }
}

fn check_rngs<T: Real>(y: &Tensor<T>, rngs: &[StreamRng]) -> Result<()> {
    if rngs.len() != y.shape()[0] {
        return Err(Error::Shape(format!("{} generators for {} inputs", rngs.len(), y.shape()[0])));
    }
    Ok(())
}

/// One weighted x-prediction step: `D([noisy, y], sigma)` regressed on
/// `target`. Returns `(loss, squared grad norm)`.
#[allow(clippy::too_many_arguments)]
fn denoiser_step<T: Real>(
    net: &mut Net<T>,
    cfg: &SchemeConfig,
    seed: u64,
    step: u64,
    noisy: Tensor<T>,
    y: &Tensor<T>,
    sigma: &[f64],
    target: &Tensor<T>,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let input = g.constant(Tensor::concat_channels(&[&noisy, y])?);
    let mut drop = rng::stream(seed, purpose::DROPOUT_DENOISER, step);
    let d = net.forward(&mut g, "den/", input, Some(sigma), Some(&mut drop))?;
    let t = g.constant(target.clone());
    let err = g.sub(d, t)?;
    let loss = g.mean_square(err)?;
    let lv = g.value(loss).item().as_f64();
    if !lv.is_finite() {
        return Err(Error::NonFinite(format!("{} loss at step {step}", cfg.scheme)));
    }
    let grads = g.backward(loss)?;
    let gn2 = net.update(&g, &grads, "den/", &cfg.adam, cfg.ema_rate)?;
    Ok((lv, gn2))
}

fn record(step: u64, loss: f64, gn2: f64) -> TrainRecord {
    TrainRecord {
        step,
        loss,
        denoise_loss: loss,
        reg_loss: 0.0,
        sigma_z: f64::NAN,
        grad_norm: gn2.sqrt(),
        residual_rmse: f64::NAN,
    }
}

/// Conditional flow matching from pure noise: `x_t = (1 - t) eps + t x`.
#[derive(Debug, Clone)]
pub struct Cfm<T> {
    cfg: SchemeConfig,
    seed: u64,
    pub denoiser: Net<T>,
}

impl<T: Real> Cfm<T> {
    pub fn new(cfg: &SchemeConfig, in_c: usize, out_c: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let denoiser = Net::new(denoiser_spec(&cfg, in_c, out_c), seed, true)?;
        Ok(Self { cfg, seed, denoiser })
    }

    /// Noise level seen by the network at flow time `t`.
    pub fn sigma_at(&self, t: f64) -> f64 {
        ((1.0 - t) * self.cfg.sigma_max()).max(self.cfg.sigma_min)
    }
}

impl<T: Real> Downscaler<T> for Cfm<T> {
    fn scheme(&self) -> Scheme {
        Scheme::Cfm
    }

    fn train_step(&mut self, batch: &Batch<T>, step: u64) -> Result<TrainRecord> {
        let b = batch.len();
        let ts = noise::uniform_draws(self.seed, purpose::TIME, step, b, 0.0, 1.0);
        let eps: Tensor<T> = noise::normal_tensor(self.seed, purpose::EPS, step, batch.x.shape());
        let one_minus: Vec<f64> = ts.iter().map(|t| 1.0 - t).collect();
        let noisy = eps.scale_each(&one_minus).zip_map(&batch.x.scale_each(&ts), |a, b| a + b)?;
        let sigma: Vec<f64> = ts.iter().map(|&t| self.sigma_at(t)).collect();
        let cfg = self.cfg.clone();
        let (l, gn2) = denoiser_step(&mut self.denoiser, &cfg, self.seed, step, noisy, &batch.y, &sigma, &batch.x)?;
        Ok(record(step, l, gn2))
    }

    fn sample(&self, y: &Tensor<T>, rngs: &mut [StreamRng]) -> Result<Tensor<T>> {
        check_rngs(y, rngs)?;
        let b = y.shape()[0];
        let mut shape = y.shape()[1..].to_vec();
        shape[0] = self.denoiser.spec.out_channels;
        let z: Tensor<T> = noise::normal_per_sample(rngs, &shape);
        flow_euler(z, self.cfg.n_steps, |x, t| {
            self.denoiser.apply(&Tensor::concat_channels(&[x, y])?, Some(&vec![self.sigma_at(t); b]))
        })
    }

    fn networks(&self) -> Vec<(&'static str, &Net<T>)> {
        vec![("denoiser", &self.denoiser)]
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Net<T>)> {
        vec![("denoiser", &mut self.denoiser)]
    }

    fn state(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn set_state(&mut self, _: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

/// Conditional variance-exploding diffusion on a target field:
/// `x_sigma = x + sigma eps`, log-normal training noise, EDM Euler sampler.
/// The noisy channel is fed to the network scaled by `1 / sqrt(sigma^2 + 1)`.
#[derive(Debug, Clone)]
pub struct VeDiffusion<T> {
    cfg: SchemeConfig,
    seed: u64,
    pub denoiser: Net<T>,
}

fn input_scale(sigma: f64) -> f64 {
    1.0 / (sigma * sigma + 1.0).sqrt()
}

impl<T: Real> VeDiffusion<T> {
    pub fn new(cfg: &SchemeConfig, in_c: usize, out_c: usize, seed: u64) -> Result<Self> {
        let denoiser = Net::new(denoiser_spec(cfg, in_c, out_c), seed, true)?;
        Ok(Self { cfg: cfg.clone(), seed, denoiser })
    }

    pub fn draw_sigmas(&self, step: u64, b: usize) -> Vec<f64> {
        noise::lognormal_draws(self.seed, purpose::SIGMA, step, b, self.cfg.lognormal_mean, self.cfg.lognormal_std)
    }

    /// Returns `(loss, squared grad norm)`.
    pub fn train_on(&mut self, target: &Tensor<T>, y: &Tensor<T>, step: u64) -> Result<(f64, f64)> {
        let b = target.shape()[0];
        let sigma = self.draw_sigmas(step, b);
        let eps: Tensor<T> = noise::normal_tensor(self.seed, purpose::EPS, step, target.shape());
        let noisy = target.zip_map(&eps.scale_each(&sigma), |a, n| a + n)?;
        let scales: Vec<f64> = sigma.iter().map(|&s| input_scale(s)).collect();
        let cfg = self.cfg.clone();
        denoiser_step(&mut self.denoiser, &cfg, self.seed, step, noisy.scale_each(&scales), y, &sigma, target)
    }

    fn denoise(&self, x: &Tensor<T>, y: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        let b = y.shape()[0];
        let xin = x.scale_each(&vec![input_scale(sigma); b]);
        self.denoiser.apply(&Tensor::concat_channels(&[&xin, y])?, Some(&vec![sigma; b]))
    }

    pub fn sample(&self, y: &Tensor<T>, rngs: &mut [StreamRng]) -> Result<Tensor<T>> {
        check_rngs(y, rngs)?;
        let b = y.shape()[0];
        let mut shape = y.shape()[1..].to_vec();
        shape[0] = self.denoiser.spec.out_channels;
        let grid = edm_sigma_grid(self.cfg.sigma_max(), self.cfg.sigma_min, self.cfg.rho, self.cfg.n_steps);
        let z: Tensor<T> = noise::normal_per_sample(rngs, &shape);
        let z = z.scale_each(&vec![grid[0]; b]);
        edm_euler(z, &grid, |x, s| self.denoise(x, y, s))
    }
}

/// Conditional diffusion baseline.
#[derive(Debug, Clone)]
pub struct Cdm<T> {
    pub diffusion: VeDiffusion<T>,
}

impl<T: Real> Cdm<T> {
    pub fn new(cfg: &SchemeConfig, in_c: usize, out_c: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { diffusion: VeDiffusion::new(&cfg.resolved(), in_c, out_c, seed)? })
    }
}

impl<T: Real> Downscaler<T> for Cdm<T> {
    fn scheme(&self) -> Scheme {
        Scheme::Cdm
    }

    fn train_step(&mut self, batch: &Batch<T>, step: u64) -> Result<TrainRecord> {
        let (l, gn2) = self.diffusion.train_on(&batch.x, &batch.y, step)?;
        Ok(record(step, l, gn2))
    }

    fn sample(&self, y: &Tensor<T>, rngs: &mut [StreamRng]) -> Result<Tensor<T>> {
        self.diffusion.sample(y, rngs)
    }

    fn networks(&self) -> Vec<(&'static str, &Net<T>)> {
        vec![("denoiser", &self.diffusion.denoiser)]
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Net<T>)> {
        vec![("denoiser", &mut self.diffusion.denoiser)]
    }

    fn state(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn set_state(&mut self, _: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

/// Deterministic MSE regression `y -> x`.
#[derive(Debug, Clone)]
pub struct Regression<T> {
    cfg: SchemeConfig,
    seed: u64,
    pub net: Net<T>,
}

impl<T: Real> Regression<T> {
    pub fn new(cfg: &SchemeConfig, in_c: usize, out_c: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let net = Net::new(regression_spec(&cfg, in_c, out_c), seed, true)?;
        Ok(Self { cfg, seed, net })
    }

    pub fn predict(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.apply(y, None)
    }

    /// Returns `(mse, squared grad norm)`.
    pub fn fit_step(&mut self, batch: &Batch<T>, step: u64) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let y = g.constant(batch.y.clone());
        let mut drop = rng::stream(self.seed, purpose::DROPOUT_REGRESSION, step);
        let p = self.net.forward(&mut g, "reg/", y, None, Some(&mut drop))?;
        let x = g.constant(batch.x.clone());
        let err = g.sub(p, x)?;
        let loss = g.mean_square(err)?;
        let lv = g.value(loss).item().as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("regression loss at step {step}")));
        }
        let grads = g.backward(loss)?;
        let gn2 = self.net.update(&g, &grads, "reg/", &self.cfg.adam, self.cfg.ema_rate)?;
        Ok((lv, gn2))
    }
}

impl<T: Real> Downscaler<T> for Regression<T> {
    fn scheme(&self) -> Scheme {
        Scheme::Regression
    }

    fn train_step(&mut self, batch: &Batch<T>, step: u64) -> Result<TrainRecord> {
        let (l, gn2) = self.fit_step(batch, step)?;
        Ok(record(step, l, gn2))
    }

    fn sample(&self, y: &Tensor<T>, _rngs: &mut [StreamRng]) -> Result<Tensor<T>> {
        self.predict(y)
    }

    fn validation_rmse(&self, batch: &Batch<T>) -> Option<Result<f64>> {
        Some(self.predict(&batch.y).and_then(|p| Ok(p.zip_map(&batch.x, |a, b| a - b)?.mean_square().sqrt())))
    }

    fn networks(&self) -> Vec<(&'static str, &Net<T>)> {
        vec![("regression", &self.net)]
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Net<T>)> {
        vec![("regression", &mut self.net)]
    }

    fn state(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn set_state(&mut self, _: &serde_json::Value) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorrDiffState {
    regression_steps: u64,
    residual_stage: bool,
    residual_scale: Vec<f64>,
}

/// Regression mean followed by diffusion on the (per-channel scaled)
/// residual `x - R(y)`.
#[derive(Debug, Clone)]
pub struct CorrDiff<T> {
    cfg: SchemeConfig,
    pub regression: Regression<T>,
    pub diffusion: VeDiffusion<T>,
    state: CorrDiffState,
}

/// Samples used to estimate the residual scale.
const RESIDUAL_SCALE_SAMPLES: usize = 512;

impl<T: Real> CorrDiff<T> {
    pub fn new(cfg: &SchemeConfig, in_c: usize, out_c: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let regression = Regression::new(&SchemeConfig { scheme: Scheme::Regression, ..cfg.clone() }, in_c, out_c, seed ^ 0x5245_4752)?;
        let diffusion = VeDiffusion::new(&cfg, in_c, out_c, seed)?;
        Ok(Self {
            cfg,
            regression,
            diffusion,
            state: CorrDiffState { regression_steps: 0, residual_stage: false, residual_scale: vec![1.0; out_c] },
        })
    }

    /// Steps given to the regression stage out of `total`.
    pub fn regression_budget(&self, total: u64) -> u64 {
        ((self.cfg.regression_fraction * total as f64).round() as u64).clamp(1, total.max(1))
    }

    pub fn in_residual_stage(&self) -> bool {
        self.state.residual_stage
    }

    pub fn residual_scale(&self) -> &[f64] {
        &self.state.residual_scale
    }

    /// Freeze the regression and estimate the per-channel residual RMS on
    /// (a prefix of) the training split.
    pub fn begin_residual_stage(&mut self, train: &Batch<T>) -> Result<()> {
        if self.state.regression_steps == 0 {
            return Err(Error::Usage("residual stage requested before the regression stage has trained".into()));
        }
        let n = train.len().min(RESIDUAL_SCALE_SAMPLES);
        let c = train.x.shape()[1];
        let mut sums = vec![0.0; c];
        let mut count = 0usize;
        for start in (0..n).step_by(16) {
            let end = (start + 16).min(n);
            let y = train.y.slice_batch(start, end)?;
            let x = train.x.slice_batch(start, end)?;
            let r = x.zip_map(&self.regression.predict(&y)?, |a, b| a - b)?;
            let hw = r.numel() / ((end - start) * c);
            for (i, chunk) in r.data().chunks(hw).enumerate() {
                sums[i % c] += chunk.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            }
            count += (end - start) * hw;
        }
        self.state.residual_scale = sums.iter().map(|s| (s / count as f64).sqrt().max(1e-6)).collect();
        self.state.residual_stage = true;
        Ok(())
    }

    fn scale_channels(&self, t: &Tensor<T>, inverse: bool) -> Tensor<T> {
        let c = self.state.residual_scale.len();
        let hw = t.numel() / (t.shape()[0] * c);
        let mut out = t.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let s = self.state.residual_scale[i % c];
            let f = T::from_f64(if inverse { 1.0 / s } else { s });
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        out
    }

    /// `R(y) + scale * r`, the final output for a residual sample `r`.
    pub fn compose(&self, mean: &Tensor<T>, residual: &Tensor<T>) -> Result<Tensor<T>> {
        mean.zip_map(&self.scale_channels(residual, false), |a, b| a + b)
    }
}

impl<T: Real> Downscaler<T> for CorrDiff<T> {
    fn scheme(&self) -> Scheme {
        Scheme::CorrDiff
    }

    fn on_step_start(&mut self, step: u64, total: u64, train: &Batch<T>) -> Result<()> {
        if !self.state.residual_stage && step >= self.regression_budget(total) {
            self.begin_residual_stage(train)?;
        }
        Ok(())
    }

    fn train_step(&mut self, batch: &Batch<T>, step: u64) -> Result<TrainRecord> {
        if !self.state.residual_stage {
            let (l, gn2) = self.regression.fit_step(batch, step)?;
            self.state.regression_steps += 1;
            return Ok(record(step, l, gn2));
        }
        let mean = self.regression.predict(&batch.y)?;
        let r = batch.x.zip_map(&mean, |a, b| a - b)?;
        let (l, gn2) = self.diffusion.train_on(&self.scale_channels(&r, true), &batch.y, step)?;
        Ok(record(step, l, gn2))
    }

    fn sample(&self, y: &Tensor<T>, rngs: &mut [StreamRng]) -> Result<Tensor<T>> {
        if !self.state.residual_stage {
            return Err(Error::Usage("CorrDiff sampled before its residual stage".into()));
        }
        let mean = self.regression.predict(y)?;
        let r = self.diffusion.sample(y, rngs)?;
        self.compose(&mean, &r)
    }

    fn validation_rmse(&self, batch: &Batch<T>) -> Option<Result<f64>> {
        self.regression.validation_rmse(batch)
    }

    fn networks(&self) -> Vec<(&'static str, &Net<T>)> {
        vec![("regression", &self.regression.net), ("denoiser", &self.diffusion.denoiser)]
    }

    fn networks_mut(&mut self) -> Vec<(&'static str, &mut Net<T>)> {
        vec![("regression", &mut self.regression.net), ("denoiser", &mut self.diffusion.denoiser)]
    }

    fn state(&self) -> serde_json::Value {
        serde_json::to_value(&self.state).expect("plain data")
    }

    fn set_state(&mut self, state: &serde_json::Value) -> Result<()> {
        self.state = serde_json::from_value(state.clone())?;
        Ok(())
    }
}
