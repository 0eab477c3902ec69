use serde::{Deserialize, Serialize};

use crate::rng::{self, StreamRng};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Stream purposes. Every draw is keyed by `(seed, purpose, step or index)`.
pub mod purpose {
    pub const SIGMA: &str = "train/sigma";
    pub const EPS: &str = "train/eps";
    pub const TIME: &str = "train/t";
    pub const DROPOUT_DENOISER: &str = "train/dropout/denoiser";
    pub const DROPOUT_ENCODER: &str = "train/dropout/encoder";
    pub const DROPOUT_REGRESSION: &str = "train/dropout/regression";
    pub const SAMPLE: &str = "sample";
}

/// Adaptive noise scale `sigma_z`, tracked as an EMA of the encoder's
/// residual RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveNoiseState {
    pub sigma_z: f64,
    pub beta: f64,
    pub last_batch_rmse: f64,
    pub adaptive_enabled: bool,
}

impl AdaptiveNoiseState {
    pub fn new(sigma_z: f64, beta: f64, adaptive_enabled: bool) -> Result<Self> {
        if !(sigma_z > 0.0 && sigma_z.is_finite()) || !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Config(format!("invalid noise state sigma_z = {sigma_z}, beta = {beta}")));
        }
        Ok(Self { sigma_z, beta, last_batch_rmse: f64::NAN, adaptive_enabled })
    }

    /// `sigma_z <- (1 - beta) sigma_z + beta * rmse` when enabled. A
    /// non-finite or zero RMSE leaves `sigma_z` alone.
    pub fn update(&mut self, batch_rmse: f64) {
        self.last_batch_rmse = batch_rmse;
        if self.adaptive_enabled && batch_rmse.is_finite() {
            let next = (1.0 - self.beta) * self.sigma_z + self.beta * batch_rmse;
            if next > 0.0 {
                self.sigma_z = next;
            }
        }
    }
}

/// Lower end of the uniform training noise range.
pub fn sigma_floor(sigma_z: f64) -> f64 {
    (1e-3 * sigma_z).max(0.002)
}

/// `b` uniform draws in `[lo, hi)`.
pub fn uniform_draws(seed: u64, purpose: &str, step: u64, b: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, purpose, step);
    (0..b).map(|_| rng::uniform(&mut r, lo, hi)).collect()
}

/// `b` draws of `exp(mean + std * n)`.
pub fn lognormal_draws(seed: u64, purpose: &str, step: u64, b: usize, mean: f64, std: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, purpose, step);
    (0..b).map(|_| (mean + std * rng::normal(&mut r)).exp()).collect()
}

/// Standard normal tensor of `shape` from one stream.
pub fn normal_tensor<T: Real>(seed: u64, purpose: &str, step: u64, shape: &[usize]) -> Tensor<T> {
    let mut r = rng::stream(seed, purpose, step);
    let mut t = Tensor::zeros(shape);
    rng::fill_normal(&mut r, t.data_mut());
    t
}

/// Standard normal tensor `[B, ...]` where sample `b` comes from `rngs[b]`.
pub fn normal_per_sample<T: Real>(rngs: &mut [StreamRng], sample_shape: &[usize]) -> Tensor<T> {
    let per: usize = sample_shape.iter().product();
    let mut shape = vec![rngs.len()];
    shape.extend_from_slice(sample_shape);
    let mut t = Tensor::zeros(&shape);
    for (chunk, r) in t.data_mut().chunks_mut(per.max(1)).zip(rngs.iter_mut()) {
        rng::fill_normal(r, chunk);
    }
    t
}

/// EDM time grid: `n` levels from `sigma_max` to `sigma_min` with
/// `rho`-polynomial spacing, followed by a final 0.
pub fn edm_sigma_grid(sigma_max: f64, sigma_min: f64, rho: f64, n: usize) -> Vec<f64> {
    let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let mut g: Vec<f64> = (0..n)
        .map(|i| {
            let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            (a + f * (b - a)).powf(rho)
        })
        .collect();
    g.push(0.0);
    g
}

/// The SFM perturbed input and its pieces, in f64 for testing.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBatch {
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    pub eps: Vec<f64>,
    pub sigma: f64,
    pub x_sigma: Vec<f64>,
}

impl PerturbationBatch {
    /// `x_sigma = x + sigma (e + eps)` with `e = (E(y) - x) / sigma_z`.
    pub fn new(x: &[f64], ey: &[f64], eps: &[f64], sigma: f64, sigma_z: f64) -> Self {
        let e: Vec<f64> = ey.iter().zip(x).map(|(a, b)| (a - b) / sigma_z).collect();
        let x_sigma = x.iter().zip(&e).zip(eps).map(|((xv, ev), nv)| xv + sigma * (ev + nv)).collect();
        Self { x: x.to_vec(), e, eps: eps.to_vec(), sigma, x_sigma }
    }

    /// Flow time `t` with `sigma = (1 - t) sigma_z`.
    pub fn time(&self, sigma_z: f64) -> f64 {
        1.0 - self.sigma / sigma_z
    }
}

/// The interpolant `(1 - t) E(y) + t x + (1 - t) sigma_z eps`.
pub fn interpolant(x: &[f64], ey: &[f64], eps: &[f64], t: f64, sigma_z: f64) -> Vec<f64> {
    x.iter()
        .zip(ey)
        .zip(eps)
        .map(|((xv, ev), nv)| (1.0 - t) * ev + t * xv + (1.0 - t) * sigma_z * nv)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_ema_arithmetic() {
        let mut s = AdaptiveNoiseState::new(1.0, 0.1, true).unwrap();
        s.update(2.0);
        assert!((s.sigma_z - 1.1).abs() < 1e-15);
        let mut off = AdaptiveNoiseState::new(1.0, 0.1, false).unwrap();
        off.update(2.0);
        assert_eq!(off.sigma_z, 1.0);
    }

    #[test]
    fn edm_grid_endpoints() {
        let g = edm_sigma_grid(800.0, 0.002, 7.0, 50);
        assert_eq!(g.len(), 51);
        assert!((g[0] - 800.0).abs() < 1e-9);
        assert!((g[49] - 0.002).abs() < 1e-12);
        assert_eq!(g[50], 0.0);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn perturbation_endpoints() {
        let x = [0.5, -1.0, 2.0];
        let ey = [0.1, 0.3, -0.2];
        let eps = [1.0, -0.4, 0.25];
        let sz = 0.7;
        let at_top = PerturbationBatch::new(&x, &ey, &eps, sz, sz);
        for i in 0..3 {
            assert!((at_top.x_sigma[i] - (ey[i] + sz * eps[i])).abs() < 1e-7);
        }
        let at_zero = PerturbationBatch::new(&x, &ey, &eps, 0.0, sz);
        assert_eq!(at_zero.x_sigma, x.to_vec());
    }

    #[test]
    fn lognormal_moments() {
        let d = lognormal_draws(3, "test", 0, 1_000_000, -1.2, 1.2);
        let logs: Vec<f64> = d.iter().map(|v| v.ln()).collect();
        let n = logs.len() as f64;
        let m = logs.iter().sum::<f64>() / n;
        let s = (logs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!((m + 1.2).abs() < 0.01, "{m}");
        assert!((s - 1.2).abs() < 0.01, "{s}");
    }

    #[test]
    fn contraction_toward_batch_rmse() {
        for (sz, r) in [(1.0, 2.0), (3.0, 0.5), (0.2, 0.2)] {
            let mut s = AdaptiveNoiseState::new(sz, 0.05, true).unwrap();
            s.update(r);
            assert!((s.sigma_z - r).abs() <= 0.95 * (sz - r).abs() + 1e-15);
        }
    }
}
