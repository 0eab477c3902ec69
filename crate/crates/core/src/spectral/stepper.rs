use std::collections::VecDeque;
use std::ops::{Add, Mul};

use rustfft::num_complex::Complex64;

use super::config::{Physics, SimConfig};
use super::workspace::SpectralWorkspace;
use crate::{rng, Error, Result};

const BLOWUP_LIMIT: f64 = 1e6;

/// Adams-Bashforth weights (newest first) given how many past tendencies exist.
pub fn ab_coefficients(n_past: usize) -> &'static [f64] {
    match n_past {
        0 => &[1.0],
        1 => &[1.5, -0.5],
        _ => &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
    }
}

/// Past explicit tendencies for the Adams-Bashforth update, newest first.
///
/// Empty history bootstraps with forward Euler, one entry gives AB2, two give
/// AB3.
#[derive(Debug, Clone, Default)]
pub struct AbHistory<T> {
    past: VecDeque<Vec<T>>,
}

impl<T> AbHistory<T>
where
    T: Copy + Add<Output = T> + Mul<f64, Output = T>,
{
    pub fn new() -> Self {
        Self { past: VecDeque::with_capacity(2) }
    }

    /// History with known past tendencies, newest first (at most two kept).
    pub fn seeded(past: Vec<Vec<T>>) -> Self {
        Self { past: past.into_iter().take(2).collect() }
    }

    pub fn len(&self) -> usize {
        self.past.len()
    }

    pub fn is_empty(&self) -> bool {
        self.past.is_empty()
    }

    /// `y += dt * sum_j c_j N_{n-j}` and push `tendency` as the newest entry.
    pub fn advance(&mut self, y: &mut [T], tendency: Vec<T>, dt: f64) {
        let c = ab_coefficients(self.past.len());
        match self.past.len() {
            0 => {
                for (v, &n0) in y.iter_mut().zip(&tendency) {
                    *v = *v + n0 * (dt * c[0]);
                }
            }
            1 => {
                let p1 = &self.past[0];
                for ((v, &n0), &n1) in y.iter_mut().zip(&tendency).zip(p1) {
                    *v = *v + (n0 * c[0] + n1 * c[1]) * dt;
                }
            }
            _ => {
                let (p1, p2) = (&self.past[0], &self.past[1]);
                for (((v, &n0), &n1), &n2) in y.iter_mut().zip(&tendency).zip(p1).zip(p2) {
                    *v = *v + (n0 * c[0] + n1 * c[1] + n2 * c[2]) * dt;
                }
            }
        }
        self.past.push_front(tendency);
        self.past.truncate(2);
    }
}

/// State of the coupled system, held in spectral space.
///
/// `zeta_hat` stores `[zeta_l_hat | zeta_h_hat]`, each `n x n`.
#[derive(Debug, Clone)]
pub struct VorticityState {
    pub zeta_hat: Vec<Complex64>,
    pub time: f64,
    pub history: AbHistory<Complex64>,
}

impl VorticityState {
    pub fn from_fields(ws: &SpectralWorkspace, zeta_l: &[f64], zeta_h: &[f64]) -> Result<Self> {
        ws.check_field(zeta_l, "zeta_l")?;
        ws.check_field(zeta_h, "zeta_h")?;
        let (l, h) = ws.forward_pair(zeta_l, zeta_h);
        let mut zeta_hat = l;
        zeta_hat.extend(h);
        Ok(Self { zeta_hat, time: 0.0, history: AbHistory::new() })
    }

    fn half(&self) -> usize {
        self.zeta_hat.len() / 2
    }

    pub fn zeta_l_hat(&self) -> &[Complex64] {
        &self.zeta_hat[..self.half()]
    }

    pub fn zeta_h_hat(&self) -> &[Complex64] {
        &self.zeta_hat[self.half()..]
    }

    /// Physical `(zeta_l, zeta_h)`.
    pub fn fields(&self, ws: &SpectralWorkspace) -> (Vec<f64>, Vec<f64>) {
        ws.inverse_pair(self.zeta_l_hat(), self.zeta_h_hat())
    }

    fn mean_square(zeta_hat: &[Complex64], n: usize) -> f64 {
        let n4 = (n * n) as f64 * (n * n) as f64;
        zeta_hat.iter().map(|c| c.norm_sqr()).sum::<f64>() / n4
    }

    /// Domain mean of `zeta_h^2`.
    pub fn enstrophy_h(&self, n: usize) -> f64 {
        Self::mean_square(self.zeta_h_hat(), n)
    }

    pub fn enstrophy_l(&self, n: usize) -> f64 {
        Self::mean_square(self.zeta_l_hat(), n)
    }

    /// Kinetic energy `0.5 <|grad psi_h|^2>`.
    pub fn energy_h(&self, ws: &SpectralWorkspace) -> f64 {
        let n = ws.n();
        let n4 = (n * n) as f64 * (n * n) as f64;
        0.5 * self
            .zeta_h_hat()
            .iter()
            .zip(&ws.inverse_laplacian)
            .map(|(z, &m)| z.norm_sqr() * (-m))
            .sum::<f64>()
            / n4
    }
}

/// Random band-limited start: spectrum `~ k^2 exp(-(k/6)^2)`, zero mean, unit
/// enstrophy, the same field for both components.
pub fn initial_condition(ws: &SpectralWorkspace, seed: u64) -> VorticityState {
    let n = ws.n();
    let mut r = rng::stream(seed, "initial-condition", 0);
    let coef: Vec<Complex64> = ws
        .k_magnitude()
        .iter()
        .map(|&k| {
            let amp = (k * k * (-(k / 6.0).powi(2)).exp()).sqrt();
            Complex64::new(rng::normal(&mut r), rng::normal(&mut r)) * amp
        })
        .collect();
    // The real part of the inverse transform is the Hermitian projection.
    let field = ws.inverse_real(&coef);
    let mut hat = ws.forward(&field);
    hat[0] = Complex64::default();
    ws.apply_dealias(&mut hat);
    let ens = VorticityState::mean_square(&hat, n);
    let scale = if ens > 0.0 { 1.0 / ens.sqrt() } else { 0.0 };
    for v in &mut hat {
        *v *= scale;
    }
    let mut zeta_hat = hat.clone();
    zeta_hat.extend(hat);
    VorticityState { zeta_hat, time: 0.0, history: AbHistory::new() }
}

fn forcing_hat(ws: &SpectralWorkspace, phys: &Physics) -> Vec<Complex64> {
    let n = ws.n();
    let mut f = vec![Complex64::default(); n * n];
    if phys.forcing_amplitude != 0.0 {
        let m = i64::from(phys.forcing_wavenumber);
        let val = 0.5 * phys.forcing_amplitude * (n * n) as f64;
        for (idx, v) in f.iter_mut().enumerate() {
            if ws.ky[idx] == 0 && ws.kx[idx].abs() == m && m != 0 {
                *v = Complex64::new(val, 0.0);
            }
        }
        ws.apply_dealias(&mut f);
    }
    f
}

fn implicit_factors(ws: &SpectralWorkspace, nu: f64, order: f64, dt: f64) -> Vec<f64> {
    ws.k_magnitude()
        .iter()
        .map(|&k| 1.0 / (1.0 + dt * nu * k.powf(order)))
        .collect()
}

fn tendency(
    state: &VorticityState,
    ws: &SpectralWorkspace,
    phys: &Physics,
    forcing: &[Complex64],
) -> Vec<Complex64> {
    let zl = state.zeta_l_hat();
    let zh = state.zeta_h_hat();
    let psi_l = ws.stream_function_hat(zl);
    let psi_h = ws.stream_function_hat(zh);
    let (j_l, j_h) = ws.jacobian_hat_pair((&psi_l, zl), (&psi_h, zh));
    let n2 = ws.len();
    let mut out = Vec::with_capacity(2 * n2);
    for m in 0..n2 {
        out.push(-j_l[m] - (zl[m] - zh[m]) * phys.inv_tau - zl[m] * phys.inv_tau_r);
    }
    for m in 0..n2 {
        out.push(-j_h[m] + forcing[m] - zh[m] * phys.inv_tau_r);
    }
    out[0] = Complex64::default();
    out[n2] = Complex64::default();
    out
}

fn check_blowup(state: &VorticityState, ws: &SpectralWorkspace) -> Result<()> {
    let n2 = ws.len() as f64;
    // sum |zeta_hat| / n^2 bounds max |zeta| from above.
    let bound_l: f64 = state.zeta_l_hat().iter().map(|c| c.norm()).sum::<f64>() / n2;
    let bound_h: f64 = state.zeta_h_hat().iter().map(|c| c.norm()).sum::<f64>() / n2;
    if !bound_l.is_finite() || !bound_h.is_finite() {
        return Err(Error::BlowUp {
            time: state.time,
            detail: "non-finite vorticity".into(),
        });
    }
    if bound_l.max(bound_h) > BLOWUP_LIMIT {
        let (l, h) = state.fields(ws);
        let peak = l.iter().chain(&h).fold(0.0f64, |a, v| a.max(v.abs()));
        if peak > BLOWUP_LIMIT {
            return Err(Error::BlowUp {
                time: state.time,
                detail: format!("|zeta| reached {peak:.3e}"),
            });
        }
    }
    Ok(())
}

/// Advance `state` by one `dt`.
pub fn step(state: &mut VorticityState, phys: &Physics, ws: &SpectralWorkspace) -> Result<()> {
    Simulator::with_physics(phys.clone(), ws).step_state(state, ws)
}

/// Precomputed per-mode multipliers for a fixed `Physics` and grid.
#[derive(Debug, Clone)]
pub struct Simulator {
    phys: Physics,
    forcing: Vec<Complex64>,
    damp_l: Vec<f64>,
    damp_h: Vec<f64>,
}

impl Simulator {
    pub fn new(cfg: &SimConfig, ws: &SpectralWorkspace) -> Self {
        Self::with_physics(Physics::from_config(cfg), ws)
    }

    pub fn with_physics(phys: Physics, ws: &SpectralWorkspace) -> Self {
        let forcing = forcing_hat(ws, &phys);
        let damp_l = implicit_factors(ws, phys.nu_l, phys.hyperviscosity_order, phys.dt);
        let damp_h = implicit_factors(ws, phys.nu_h, phys.hyperviscosity_order, phys.dt);
        Self { phys, forcing, damp_l, damp_h }
    }

    pub fn physics(&self) -> &Physics {
        &self.phys
    }

    /// Per-mode amplification of the implicit dissipation substep for
    /// `(zeta_l, zeta_h)`.
    pub fn dissipation_factors(&self) -> (&[f64], &[f64]) {
        (&self.damp_l, &self.damp_h)
    }

    pub fn step_state(&self, state: &mut VorticityState, ws: &SpectralWorkspace) -> Result<()> {
        let n2 = ws.len();
        let tend = tendency(state, ws, &self.phys, &self.forcing);
        let mut history = std::mem::take(&mut state.history);
        history.advance(&mut state.zeta_hat, tend, self.phys.dt);
        state.history = history;
        for m in 0..n2 {
            state.zeta_hat[m] *= self.damp_l[m];
            state.zeta_hat[n2 + m] *= self.damp_h[m];
        }
        let (l, h) = state.zeta_hat.split_at_mut(n2);
        ws.apply_dealias(l);
        ws.apply_dealias(h);
        l[0] = Complex64::default();
        h[0] = Complex64::default();
        state.time += self.phys.dt;
        check_blowup(state, ws)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_fn(ws: &SpectralWorkspace, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let n = ws.n();
        (0..n * n)
            .map(|idx| {
                let (x, y) = ws.coords(idx / n, idx % n);
                f(x, y)
            })
            .collect()
    }

    #[test]
    fn single_mode_is_steady_without_forcing_or_dissipation() {
        let ws = SpectralWorkspace::new(32).unwrap();
        let z = grid_fn(&ws, |x, y| (x + y).sin());
        let mut state = VorticityState::from_fields(&ws, &z, &z).unwrap();
        let phys = Physics::inviscid(1e-3);
        let sim = Simulator::with_physics(phys, &ws);
        for _ in 0..100 {
            sim.step_state(&mut state, &ws).unwrap();
        }
        let (l, h) = state.fields(&ws);
        for ((a, b), c) in l.iter().zip(&h).zip(&z) {
            assert!((a - c).abs() < 1e-8);
            assert!((b - c).abs() < 1e-8);
        }
    }

    /// Error of AB3 on dy/dt = -lambda y over [0, 1], with exact start-up
    /// history so the measured order is the scheme's own.
    fn ab3_error(dt: f64, lambda: f64) -> f64 {
        let steps = (1.0 / dt).round() as usize;
        let exact = |t: f64| (-lambda * t).exp();
        let mut hist = AbHistory::seeded(vec![
            vec![-lambda * exact(-dt)],
            vec![-lambda * exact(-2.0 * dt)],
        ]);
        let mut y = [1.0f64];
        for _ in 0..steps {
            let tend = vec![-lambda * y[0]];
            hist.advance(&mut y, tend, dt);
        }
        (y[0] - exact(1.0)).abs()
    }

    #[test]
    fn ab3_is_third_order() {
        let e1 = ab3_error(0.02, 1.0);
        let e2 = ab3_error(0.01, 1.0);
        let ratio = e1 / e2;
        assert!((ratio - 8.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn bootstrap_sequence_uses_euler_then_ab2() {
        let mut hist = AbHistory::new();
        let mut y = [0.0f64];
        hist.advance(&mut y, vec![1.0], 0.1);
        assert!((y[0] - 0.1).abs() < 1e-15);
        hist.advance(&mut y, vec![2.0], 0.1);
        assert!((y[0] - (0.1 + 0.1 * (1.5 * 2.0 - 0.5 * 1.0))).abs() < 1e-15);
        assert_eq!(hist.len(), 2);
    }

    #[test]
    fn dissipation_factors_are_damping() {
        let ws = SpectralWorkspace::new(64).unwrap();
        let sim = Simulator::new(&SimConfig::default(), &ws);
        let (l, h) = sim.dissipation_factors();
        assert!(l.iter().chain(h).all(|&f| f > 0.0 && f <= 1.0));
        assert_eq!(l[0], 1.0);
    }

    #[test]
    fn initial_condition_statistics() {
        let ws = SpectralWorkspace::new(64).unwrap();
        let s = initial_condition(&ws, 3);
        assert!((s.enstrophy_h(64) - 1.0).abs() < 1e-12);
        assert_eq!(s.zeta_l_hat(), s.zeta_h_hat());
        let (l, _) = s.fields(&ws);
        let mean: f64 = l.iter().sum::<f64>() / l.len() as f64;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn blowup_is_reported_with_time() {
        let ws = SpectralWorkspace::new(16).unwrap();
        let mut state = initial_condition(&ws, 1);
        for v in &mut state.zeta_hat {
            *v *= 1e12;
        }
        let err = step(&mut state, &Physics::inviscid(1e-3), &ws).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }), "{err}");
    }
}
