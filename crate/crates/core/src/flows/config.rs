use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::AdamConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "SFM")]
    Sfm,
    #[serde(rename = "CFM")]
    Cfm,
    #[serde(rename = "CDM")]
    Cdm,
    CorrDiff,
    Regression,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::Sfm, Scheme::Cfm, Scheme::Cdm, Scheme::CorrDiff, Scheme::Regression];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Sfm => "SFM",
            Scheme::Cfm => "CFM",
            Scheme::Cdm => "CDM",
            Scheme::CorrDiff => "CorrDiff",
            Scheme::Regression => "Regression",
        }
    }

    pub fn is_deterministic(self) -> bool {
        self == Scheme::Regression
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}; expected one of SFM, CFM, CDM, CorrDiff, Regression")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Single pointwise convolution.
    Conv1x1,
    /// Residual CNN without noise embedding.
    Convnet,
    /// Always outputs zeros; has no parameters.
    Zero,
}

/// Residual CNN shape shared by denoisers and CNN encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_channels: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub positional_channels: bool,
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden_channels: 48, n_blocks: 6, kernel_size: 3, positional_channels: true, dropout: 0.13 }
    }
}

/// Everything that defines a scheme's training objective and sampler.
///
/// `lambda`, `sigma_max` and `condition_on_y` default per scheme and encoder;
/// [`SchemeConfig::resolved`] fills them in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub encoder_kind: EncoderKind,
    pub lambda: Option<f64>,
    pub condition_on_y: Option<bool>,
    pub sigma_min: f64,
    pub sigma_max: Option<f64>,
    pub n_steps: usize,
    pub adaptive_sigma: bool,
    pub beta: f64,
    pub sigma_z_init: f64,
    pub lognormal_mean: f64,
    pub lognormal_std: f64,
    pub rho: f64,
    /// Fraction of the step budget spent on the CorrDiff regression stage.
    pub regression_fraction: f64,
    pub network: NetworkConfig,
    pub adam: AdamConfig,
    pub ema_rate: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self::for_scheme(Scheme::Sfm)
    }
}

impl SchemeConfig {
    pub fn for_scheme(scheme: Scheme) -> Self {
        Self {
            scheme,
            encoder_kind: EncoderKind::Conv1x1,
            lambda: None,
            condition_on_y: None,
            sigma_min: 0.002,
            sigma_max: None,
            n_steps: 50,
            adaptive_sigma: true,
            beta: 0.01,
            sigma_z_init: 1.0,
            lognormal_mean: -1.2,
            lognormal_std: 1.2,
            rho: 7.0,
            regression_fraction: 0.4,
            network: NetworkConfig::default(),
            adam: AdamConfig::default(),
            ema_rate: 0.5,
        }
    }

    /// Copy with every scheme-dependent default made explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let convnet = c.encoder_kind == EncoderKind::Convnet;
        c.lambda.get_or_insert(if convnet { 0.25 } else { 0.0 });
        c.condition_on_y.get_or_insert(match c.scheme {
            Scheme::Sfm => convnet,
            _ => true,
        });
        c.sigma_max.get_or_insert(match c.scheme {
            Scheme::Cdm | Scheme::CorrDiff => 800.0,
            Scheme::Cfm => 1.0,
            Scheme::Sfm | Scheme::Regression => c.sigma_z_init,
        });
        c
    }

    pub fn lambda(&self) -> f64 {
        self.resolved().lambda.expect("resolved")
    }

    pub fn condition_on_y(&self) -> bool {
        self.resolved().condition_on_y.expect("resolved")
    }

    pub fn sigma_max(&self) -> f64 {
        self.resolved().sigma_max.expect("resolved")
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        let bad = |m: String| Err(Error::Config(m));
        if c.lambda() < 0.0 || !c.lambda().is_finite() {
            return bad(format!("lambda {} must be finite and non-negative", c.lambda()));
        }
        if !(c.sigma_min > 0.0 && c.sigma_max() > c.sigma_min) {
            return bad(format!("need 0 < sigma_min < sigma_max, got {} and {}", c.sigma_min, c.sigma_max()));
        }
        if c.n_steps == 0 {
            return bad("n_steps must be at least 1".into());
        }
        if !(c.beta > 0.0 && c.beta < 1.0) {
            return bad(format!("beta {} outside (0, 1)", c.beta));
        }
        if !(c.sigma_z_init > 0.0 && c.sigma_z_init.is_finite()) {
            return bad(format!("sigma_z_init {} must be positive", c.sigma_z_init));
        }
        if !(c.lognormal_std > 0.0) || !(c.rho > 0.0) {
            return bad("lognormal_std and rho must be positive".into());
        }
        if !(c.regression_fraction > 0.0 && c.regression_fraction < 1.0) {
            return bad(format!("regression_fraction {} outside (0, 1)", c.regression_fraction));
        }
        if !(0.0..=1.0).contains(&c.ema_rate) {
            return bad(format!("ema_rate {} outside [0, 1]", c.ema_rate));
        }
        if c.scheme != Scheme::Sfm && c.encoder_kind != EncoderKind::Conv1x1 {
            return bad("encoder_kind applies to SFM only".into());
        }
        c.adam.validate()
    }
}

/// One training step's diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub denoise_loss: f64,
    /// The lambda-weighted encoder penalty.
    pub reg_loss: f64,
    pub sigma_z: f64,
    pub grad_norm: f64,
    /// RMSE of `x - E(y)` on the batch (SFM), else NaN.
    pub residual_rmse: f64,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "step,loss,denoise_loss,reg_loss,sigma_z,grad_norm,residual_rmse";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss, self.denoise_loss, self.reg_loss, self.sigma_z, self.grad_norm, self.residual_rmse
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.loss, self.denoise_loss, self.reg_loss, self.sigma_z, self.grad_norm]
            .iter()
            .all(|v| v.is_finite())
    }
}
