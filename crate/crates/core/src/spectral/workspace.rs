use rustfft::num_complex::Complex64;

use super::fft::Fft2;
use crate::{Error, Result};

/// Per-grid spectral operators on the doubly periodic domain `[0, 2pi)^2`.
///
/// Fields are row-major `n x n`; the column index runs along `x` and the row
/// index along `y`.
#[derive(Debug)]
pub struct SpectralWorkspace {
    n: usize,
    fft: Fft2,
    /// Signed integer wavenumber along x for each mode.
    pub kx: Vec<i64>,
    pub ky: Vec<i64>,
    /// 2/3-rule mask: false for every mode with |kx| > n/3 or |ky| > n/3.
    pub dealias_mask: Vec<bool>,
    /// Multiplier solving `lap(psi) = zeta` per mode; exactly 0 at k = 0.
    pub inverse_laplacian: Vec<f64>,
    /// Wavenumbers used for first derivatives (Nyquist mode set to 0).
    dx: Vec<f64>,
    dy: Vec<f64>,
    k_mag: Vec<f64>,
}

fn signed_freq(m: usize, n: usize) -> i64 {
    if m <= n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

impl SpectralWorkspace {
    pub fn new(n: usize) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::Config(format!(
                "grid size {n} must be a power of two"
            )));
        }
        let cutoff = n as f64 / 3.0;
        let mut kx = Vec::with_capacity(n * n);
        let mut ky = Vec::with_capacity(n * n);
        let mut mask = Vec::with_capacity(n * n);
        let mut inv_lap = Vec::with_capacity(n * n);
        let mut dx = Vec::with_capacity(n * n);
        let mut dy = Vec::with_capacity(n * n);
        let mut k_mag = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (qx, qy) = (signed_freq(j, n), signed_freq(i, n));
                kx.push(qx);
                ky.push(qy);
                mask.push((qx.abs() as f64) <= cutoff && (qy.abs() as f64) <= cutoff);
                let k2 = (qx * qx + qy * qy) as f64;
                inv_lap.push(if k2 == 0.0 { 0.0 } else { -1.0 / k2 });
                let nyq = (n / 2) as i64;
                dx.push(if qx.abs() == nyq { 0.0 } else { qx as f64 });
                dy.push(if qy.abs() == nyq { 0.0 } else { qy as f64 });
                k_mag.push(k2.sqrt());
            }
        }
        Ok(Self {
            n,
            fft: Fft2::new(n),
            kx,
            ky,
            dealias_mask: mask,
            inverse_laplacian: inv_lap,
            dx,
            dy,
            k_mag,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// |k| per mode.
    pub fn k_magnitude(&self) -> &[f64] {
        &self.k_mag
    }

    /// Coordinates `(x, y)` of grid point `(row, col)`.
    pub fn coords(&self, row: usize, col: usize) -> (f64, f64) {
        let h = 2.0 * std::f64::consts::PI / self.n as f64;
        (col as f64 * h, row as f64 * h)
    }

    pub fn check_field(&self, f: &[f64], what: &str) -> Result<()> {
        if f.len() != self.len() {
            return Err(Error::Config(format!(
                "{what} has {} values, workspace grid is {}x{}",
                f.len(),
                self.n,
                self.n
            )));
        }
        Ok(())
    }

    pub fn forward(&self, f: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut buf);
        buf
    }

    pub fn inverse_real(&self, f_hat: &[Complex64]) -> Vec<f64> {
        let mut buf = f_hat.to_vec();
        self.fft.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Transform two real fields with one complex FFT.
    pub fn forward_pair(&self, a: &[f64], b: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.n;
        let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&p, &q)| Complex64::new(p, q)).collect();
        self.fft.forward(&mut z);
        let mut a_hat = vec![Complex64::default(); n * n];
        let mut b_hat = vec![Complex64::default(); n * n];
        for i in 0..n {
            let im = (n - i) % n;
            for j in 0..n {
                let jm = (n - j) % n;
                let zk = z[i * n + j];
                let zmk = z[im * n + jm].conj();
                a_hat[i * n + j] = (zk + zmk) * 0.5;
                b_hat[i * n + j] = (zk - zmk) * Complex64::new(0.0, -0.5);
            }
        }
        (a_hat, b_hat)
    }

    /// Inverse-transform two Hermitian spectra with one complex FFT.
    pub fn inverse_pair(&self, a_hat: &[Complex64], b_hat: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let i = Complex64::new(0.0, 1.0);
        let mut z: Vec<Complex64> = a_hat.iter().zip(b_hat).map(|(&p, &q)| p + i * q).collect();
        self.fft.inverse(&mut z);
        z.into_iter().map(|c| (c.re, c.im)).unzip()
    }

    pub fn apply_dealias(&self, f_hat: &mut [Complex64]) {
        for (v, &keep) in f_hat.iter_mut().zip(&self.dealias_mask) {
            if !keep {
                *v = Complex64::default();
            }
        }
    }

    pub fn stream_function_hat(&self, zeta_hat: &[Complex64]) -> Vec<Complex64> {
        zeta_hat
            .iter()
            .zip(&self.inverse_laplacian)
            .map(|(&z, &m)| z * m)
            .collect()
    }

    /// Spectral Jacobian `J(f, g) = f_x g_y - f_y g_x`, returned dealiased in
    /// spectral space.
    pub fn jacobian_hat(&self, f_hat: &[Complex64], g_hat: &[Complex64]) -> Vec<Complex64> {
        let i = Complex64::new(0.0, 1.0);
        let n2 = self.len();
        let mut fx = Vec::with_capacity(n2);
        let mut fy = Vec::with_capacity(n2);
        let mut gx = Vec::with_capacity(n2);
        let mut gy = Vec::with_capacity(n2);
        for m in 0..n2 {
            fx.push(i * self.dx[m] * f_hat[m]);
            fy.push(i * self.dy[m] * f_hat[m]);
            gx.push(i * self.dx[m] * g_hat[m]);
            gy.push(i * self.dy[m] * g_hat[m]);
        }
        let (fx, fy) = self.inverse_pair(&fx, &fy);
        let (gx, gy) = self.inverse_pair(&gx, &gy);
        let prod: Vec<f64> = (0..n2).map(|m| fx[m] * gy[m] - fy[m] * gx[m]).collect();
        let mut j_hat = self.forward(&prod);
        self.apply_dealias(&mut j_hat);
        j_hat
    }

    /// Jacobians of two independent pairs, sharing FFTs between them.
    pub(crate) fn jacobian_hat_pair(
        &self,
        (f1, g1): (&[Complex64], &[Complex64]),
        (f2, g2): (&[Complex64], &[Complex64]),
    ) -> (Vec<Complex64>, Vec<Complex64>) {
        let i = Complex64::new(0.0, 1.0);
        let n2 = self.len();
        let deriv = |h: &[Complex64], k: &[f64]| -> Vec<Complex64> {
            h.iter().zip(k).map(|(&v, &q)| i * q * v).collect()
        };
        let (f1x, f1y) = self.inverse_pair(&deriv(f1, &self.dx), &deriv(f1, &self.dy));
        let (g1x, g1y) = self.inverse_pair(&deriv(g1, &self.dx), &deriv(g1, &self.dy));
        let (f2x, f2y) = self.inverse_pair(&deriv(f2, &self.dx), &deriv(f2, &self.dy));
        let (g2x, g2y) = self.inverse_pair(&deriv(g2, &self.dx), &deriv(g2, &self.dy));
        let j1: Vec<f64> = (0..n2).map(|m| f1x[m] * g1y[m] - f1y[m] * g1x[m]).collect();
        let j2: Vec<f64> = (0..n2).map(|m| f2x[m] * g2y[m] - f2y[m] * g2x[m]).collect();
        let (mut a, mut b) = self.forward_pair(&j1, &j2);
        self.apply_dealias(&mut a);
        self.apply_dealias(&mut b);
        (a, b)
    }

    /// `J(f, g)` on physical fields.
    pub fn jacobian(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.check_field(f, "f")?;
        self.check_field(g, "g")?;
        let (f_hat, g_hat) = self.forward_pair(f, g);
        Ok(self.inverse_real(&self.jacobian_hat(&f_hat, &g_hat)))
    }

    /// Solve `lap(psi) = zeta` with the zero-mean gauge.
    pub fn poisson_solve(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        self.check_field(zeta, "zeta")?;
        let psi_hat = self.stream_function_hat(&self.forward(zeta));
        Ok(self.inverse_real(&psi_hat))
    }

    pub fn laplacian(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_field(f, "f")?;
        let mut f_hat = self.forward(f);
        for (v, (&qx, &qy)) in f_hat.iter_mut().zip(self.kx.iter().zip(&self.ky)) {
            *v *= -((qx * qx + qy * qy) as f64);
        }
        Ok(self.inverse_real(&f_hat))
    }
}
