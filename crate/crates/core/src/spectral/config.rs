use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Simulation parameters for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Points per side; a power of two, at least 16.
    pub grid_n: usize,
    pub dt: f64,
    /// Snapshot interval in model time; an integer multiple of `dt`.
    pub save_every: f64,
    /// Integration steps recorded after spin-up.
    pub n_steps: u64,
    /// Nudging time scale of `zeta_l` towards `zeta_h`.
    pub tau: f64,
    /// Rayleigh damping time.
    pub tau_r: f64,
    /// Hyperviscosity coefficients; derived from the grid when absent.
    pub nu_h: Option<f64>,
    pub nu_l: Option<f64>,
    /// Exponent `p` of the spectral dissipation `-nu |k|^p`.
    pub hyperviscosity_order: f64,
    pub forcing_amplitude: f64,
    pub forcing_wavenumber: u32,
    pub seed: u64,
    /// Model time integrated and discarded before the first snapshot.
    pub spinup_time: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid_n: 64,
            dt: 1e-3,
            save_every: 0.2,
            n_steps: 56_000,
            tau: 5.0,
            tau_r: 100.0,
            nu_h: None,
            nu_l: None,
            hyperviscosity_order: 7.0,
            forcing_amplitude: 10.0,
            forcing_wavenumber: 10,
            seed: 0,
            spinup_time: 50.0,
        }
    }
}

impl SimConfig {
    /// Cutoff wavenumber of the 2/3 rule.
    pub fn dealias_cutoff(&self) -> f64 {
        self.grid_n as f64 / 3.0
    }

    /// `(nu_h, nu_l)`, filling in the grid-derived defaults.
    ///
    /// Defaults make the backward-Euler damping of `zeta_h` halve an amplitude
    /// in one time unit at the dealiasing cutoff, and do the same for `zeta_l`
    /// at half the cutoff.
    pub fn resolved_nu(&self) -> (f64, f64) {
        let kc = self.dealias_cutoff();
        let p = self.hyperviscosity_order;
        let nu_h = self.nu_h.unwrap_or(std::f64::consts::LN_2 / kc.powf(p));
        let nu_l = self
            .nu_l
            .unwrap_or(std::f64::consts::LN_2 / (0.5 * kc).powf(p));
        (nu_h, nu_l)
    }

    pub fn steps_per_save(&self) -> u64 {
        (self.save_every / self.dt).round().max(1.0) as u64
    }

    pub fn spinup_steps(&self) -> u64 {
        (self.spinup_time / self.dt).round() as u64
    }

    pub fn n_snapshots(&self) -> usize {
        (self.n_steps / self.steps_per_save()) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.grid_n < 16 || !self.grid_n.is_power_of_two() {
            return bad(format!("grid_n = {} must be a power of two >= 16", self.grid_n));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        let ratio = self.save_every / self.dt;
        if !(ratio >= 1.0 - 1e-9) || ((ratio - ratio.round()).abs() > 1e-9 * ratio) {
            return bad(format!(
                "save_every = {} must be an integer multiple of dt = {}",
                self.save_every, self.dt
            ));
        }
        if !(self.tau > 0.0) || !(self.tau_r > 0.0) {
            return bad("tau and tau_r must be positive".into());
        }
        if !(self.spinup_time >= 0.0) {
            return bad("spinup_time must be non-negative".into());
        }
        let (nu_h, nu_l) = self.resolved_nu();
        if !(nu_h > 0.0 && nu_l > nu_h) {
            return bad(format!("need nu_l > nu_h > 0, got nu_h = {nu_h}, nu_l = {nu_l}"));
        }
        if !(self.hyperviscosity_order > 0.0) {
            return bad("hyperviscosity_order must be positive".into());
        }
        if f64::from(self.forcing_wavenumber) > self.dealias_cutoff() {
            return bad(format!(
                "forcing wavenumber {} is removed by the dealiasing cutoff {:.2}",
                self.forcing_wavenumber,
                self.dealias_cutoff()
            ));
        }
        if self.n_snapshots() == 0 {
            return bad(format!(
                "n_steps = {} records no snapshot at save_every = {}",
                self.n_steps, self.save_every
            ));
        }
        Ok(())
    }
}

/// Resolved right-hand-side coefficients.
///
/// Rates are stored as inverses so that a disabled term is simply `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Physics {
    pub dt: f64,
    pub inv_tau: f64,
    pub inv_tau_r: f64,
    pub nu_h: f64,
    pub nu_l: f64,
    pub hyperviscosity_order: f64,
    pub forcing_amplitude: f64,
    pub forcing_wavenumber: u32,
}

impl Physics {
    pub fn from_config(cfg: &SimConfig) -> Self {
        let (nu_h, nu_l) = cfg.resolved_nu();
        Self {
            dt: cfg.dt,
            inv_tau: 1.0 / cfg.tau,
            inv_tau_r: 1.0 / cfg.tau_r,
            nu_h,
            nu_l,
            hyperviscosity_order: cfg.hyperviscosity_order,
            forcing_amplitude: cfg.forcing_amplitude,
            forcing_wavenumber: cfg.forcing_wavenumber,
        }
    }

    /// Unforced, undamped, uncoupled dynamics (2D Euler for each field).
    pub fn inviscid(dt: f64) -> Self {
        Self {
            dt,
            inv_tau: 0.0,
            inv_tau_r: 0.0,
            nu_h: 0.0,
            nu_l: 0.0,
            hyperviscosity_order: 7.0,
            forcing_amplitude: 0.0,
            forcing_wavenumber: 0,
        }
    }
}
