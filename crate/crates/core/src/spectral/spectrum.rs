use serde::{Deserialize, Serialize};

use super::fft::Fft2;
use rustfft::num_complex::Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBin {
    pub k: usize,
    pub power: f64,
}

/// Isotropic power spectrum of a square field.
///
/// Modal power `|f_hat(k)|^2` (with `f_hat` normalized by `n^2`, so a unit
/// cosine carries 0.25 per mode) is averaged within integer shells
/// `round(|k|)`, for shells `0..=n/2`. Corner modes beyond `n/2` are dropped.
pub fn radial_power_spectrum(field: &[f64], n: usize) -> Vec<SpectrumBin> {
    assert_eq!(field.len(), n * n, "radial_power_spectrum needs a square field");
    let fft = Fft2::new(n);
    let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut buf);
    let norm = 1.0 / ((n * n) as f64).powi(2);
    let n_bins = n / 2 + 1;
    let mut sum = vec![0.0f64; n_bins];
    let mut count = vec![0usize; n_bins];
    let freq = |m: usize| if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
    for i in 0..n {
        for j in 0..n {
            let k = (freq(i).powi(2) + freq(j).powi(2)).sqrt();
            let bin = (k + 0.5).floor() as usize;
            if bin < n_bins {
                sum[bin] += buf[i * n + j].norm_sqr() * norm;
                count[bin] += 1;
            }
        }
    }
    sum.into_iter()
        .zip(count)
        .enumerate()
        .map(|(k, (s, c))| SpectrumBin {
            k,
            power: if c > 0 { s / c as f64 } else { 0.0 },
        })
        .collect()
}
