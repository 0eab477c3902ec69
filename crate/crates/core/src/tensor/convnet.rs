use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamStore, Real, Tensor, Var};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Width of the sinusoidal noise-level feature vector.
pub const SIGMA_FEATURES: usize = 64;

/// Residual CNN used for both denoisers and encoders.
///
/// With `n_blocks == 0` the network is a single 1x1 convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_channels: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub use_sigma_embedding: bool,
    pub use_positional_channels: bool,
    #[serde(default)]
    pub dropout: f64,
}

/// `[B, 64]` features: cos and sin of `f_j ln(sigma)` over 32 log-spaced
/// frequencies from 10 down to 0.01.
pub fn sigma_features(sigma: &[f64]) -> Vec<f64> {
    let half = SIGMA_FEATURES / 2;
    let mut out = Vec::with_capacity(sigma.len() * SIGMA_FEATURES);
    for &s in sigma {
        let l = s.max(1e-12).ln();
        for j in 0..half {
            let f = 10f64.powf(1.0 - 3.0 * j as f64 / (half - 1) as f64);
            out.push((f * l).cos());
        }
        for j in 0..half {
            let f = 10f64.powf(1.0 - 3.0 * j as f64 / (half - 1) as f64);
            out.push((f * l).sin());
        }
    }
    out
}

fn positional_channels<T: Real>(b: usize, h: usize, w: usize) -> Tensor<T> {
    let mut one = Vec::with_capacity(4 * h * w);
    for c in 0..4 {
        for i in 0..h {
            for j in 0..w {
                let x = 2.0 * PI * j as f64 / w as f64;
                let y = 2.0 * PI * i as f64 / h as f64;
                one.push(T::from_f64(match c {
                    0 => x.sin(),
                    1 => x.cos(),
                    2 => y.sin(),
                    _ => y.cos(),
                }));
            }
        }
    }
    let mut data = Vec::with_capacity(b * one.len());
    for _ in 0..b {
        data.extend_from_slice(&one);
    }
    Tensor::new(vec![b, 4, h, w], data).expect("consistent shape")
}

impl ConvNetSpec {
    /// Single 1x1 convolution `in -> out`.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            hidden_channels: 0,
            n_blocks: 0,
            kernel_size: 1,
            use_sigma_embedding: false,
            use_positional_channels: false,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("network needs at least one input and output channel".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.n_blocks > 0 && self.hidden_channels == 0 {
            return Err(Error::Config("hidden_channels must be positive".into()));
        }
        if self.n_blocks == 0 && self.use_sigma_embedding {
            return Err(Error::Config("sigma embedding needs at least one residual block".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Channels seen by the first layer.
    pub fn effective_in_channels(&self) -> usize {
        self.in_channels + if self.use_positional_channels { 4 } else { 0 }
    }

    /// Parameter names and shapes, in creation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let cin = self.effective_in_channels();
        let (h, k) = (self.hidden_channels, self.kernel_size);
        let mut v = Vec::new();
        if self.n_blocks == 0 {
            v.push(("head.w".into(), vec![self.out_channels, cin, 1, 1]));
            v.push(("head.b".into(), vec![self.out_channels]));
            return v;
        }
        v.push(("stem.w".into(), vec![h, cin, k, k]));
        v.push(("stem.b".into(), vec![h]));
        if self.use_sigma_embedding {
            v.push(("emb.fc1.w".into(), vec![h, SIGMA_FEATURES]));
            v.push(("emb.fc1.b".into(), vec![h]));
            v.push(("emb.fc2.w".into(), vec![h, h]));
            v.push(("emb.fc2.b".into(), vec![h]));
        }
        for i in 0..self.n_blocks {
            v.push((format!("blocks.{i}.conv1.w"), vec![h, h, k, k]));
            v.push((format!("blocks.{i}.conv1.b"), vec![h]));
            if self.use_sigma_embedding {
                v.push((format!("blocks.{i}.emb.w"), vec![h, h]));
                v.push((format!("blocks.{i}.emb.b"), vec![h]));
            }
            v.push((format!("blocks.{i}.conv2.w"), vec![h, h, k, k]));
            v.push((format!("blocks.{i}.conv2.b"), vec![h]));
        }
        v.push(("head.w".into(), vec![self.out_channels, h, 1, 1]));
        v.push(("head.b".into(), vec![self.out_channels]));
        v
    }

    /// Fan-in scaled normal weights, zero biases. `zero_head` zeroes the
    /// final layer so the untrained network outputs zeros.
    pub fn init<T: Real>(&self, seed: u64, zero_head: bool) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = rng::stream(seed, "init", 0);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let is_bias = name.ends_with(".b");
            let is_head = name.starts_with("head.");
            let data = if is_bias || (zero_head && is_head) {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::from_f64(std * rng::normal(&mut rng))).collect()
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    /// Record the forward pass on `g`. Parameter leaves are named
    /// `{prefix}{param}`. Dropout is active only when `dropout_rng` is given.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        prefix: &str,
        input: Var,
        sigma: Option<&[f64]>,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "network expects [B,{},H,W] input, got {shape:?}",
                self.in_channels
            )));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        match (self.use_sigma_embedding, sigma) {
            (true, None) => return Err(Error::Shape("sigma is required by this network".into())),
            (true, Some(s)) if s.len() != b => {
                return Err(Error::Shape(format!("{} sigmas for batch {b}", s.len())))
            }
            _ => {}
        }
        let mut x = input;
        if self.use_positional_channels {
            let pos = g.constant(positional_channels(b, h, w));
            x = g.concat_channels(&[x, pos])?;
        }
        let leaf = |g: &mut Graph<T>, name: &str| params.leaf(g, prefix, name);

        if self.n_blocks == 0 {
            let hw = leaf(g, "head.w")?;
            let hb = leaf(g, "head.b")?;
            return g.conv2d(x, hw, Some(hb));
        }

        let emb = match sigma.filter(|_| self.use_sigma_embedding) {
            Some(s) => {
                let feats = Tensor::from_f64(&[b, SIGMA_FEATURES], &sigma_features(s))?;
                let f = g.constant(feats);
                let (w1, b1) = (leaf(g, "emb.fc1.w")?, leaf(g, "emb.fc1.b")?);
                let e = g.linear(f, w1, Some(b1))?;
                let e = g.silu(e);
                let (w2, b2) = (leaf(g, "emb.fc2.w")?, leaf(g, "emb.fc2.b")?);
                let e = g.linear(e, w2, Some(b2))?;
                Some(g.silu(e))
            }
            None => None,
        };

        let (sw, sb) = (leaf(g, "stem.w")?, leaf(g, "stem.b")?);
        let mut hcur = g.conv2d(x, sw, Some(sb))?;
        for i in 0..self.n_blocks {
            let a = g.silu(hcur);
            let (w1, b1) = (leaf(g, &format!("blocks.{i}.conv1.w"))?, leaf(g, &format!("blocks.{i}.conv1.b"))?);
            let mut r = g.conv2d(a, w1, Some(b1))?;
            if let Some(e) = emb {
                let (ew, eb) = (leaf(g, &format!("blocks.{i}.emb.w"))?, leaf(g, &format!("blocks.{i}.emb.b"))?);
                let bias = g.linear(e, ew, Some(eb))?;
                r = g.channel_bias(r, bias)?;
            }
            r = g.silu(r);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if self.dropout > 0.0 {
                    let keep = 1.0 - self.dropout;
                    let scale = T::from_f64(1.0 / keep);
                    let n = g.value(r).numel();
                    let mask = (0..n)
                        .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                        .collect();
                    r = g.mask(r, mask)?;
                }
            }
            let (w2, b2) = (leaf(g, &format!("blocks.{i}.conv2.w"))?, leaf(g, &format!("blocks.{i}.conv2.b"))?);
            let r = g.conv2d(r, w2, Some(b2))?;
            hcur = g.add(hcur, r)?;
        }
        let a = g.silu(hcur);
        let (hw, hb) = (leaf(g, "head.w")?, leaf(g, "head.b")?);
        g.conv2d(a, hw, Some(hb))
    }

    /// Inference-mode forward (no dropout, no gradients needed).
    pub fn apply<T: Real>(
        &self,
        params: &ParamStore<T>,
        input: &Tensor<T>,
        sigma: Option<&[f64]>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, params, "", x, sigma, None)?;
        Ok(g.value(y).clone())
    }
}
