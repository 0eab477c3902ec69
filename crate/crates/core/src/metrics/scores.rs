use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrpsEstimator {
    /// `E|X-x| - 1/(2m^2) sum |Xi-Xj|`.
    #[default]
    Biased,
    /// Same with `m(m-1)` in the spread term.
    Unbiased,
}

/// CRPS of one point. `sorted` must be the ensemble in ascending order.
pub fn crps_point(sorted: &[f64], obs: f64, estimator: CrpsEstimator) -> f64 {
    let m = sorted.len();
    debug_assert!(m >= 1);
    let mf = m as f64;
    let abs_err: f64 = sorted.iter().map(|v| (v - obs).abs()).sum::<f64>() / mf;
    // sum_{i,j} |Xi - Xj| = 2 sum_i (2i - m + 1) X_(i)
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - mf + 1.0) * v)
        .sum::<f64>();
    let denom = match estimator {
        CrpsEstimator::Biased => mf * mf,
        CrpsEstimator::Unbiased if m > 1 => mf * (mf - 1.0),
        CrpsEstimator::Unbiased => 1.0,
    };
    abs_err - pair / denom
}

/// Mean biased CRPS over points: `members[p]` is the ensemble at point `p`.
pub fn crps_ensemble(members: &[Vec<f64>], obs: &[f64]) -> Result<f64> {
    if members.is_empty() || members.len() != obs.len() {
        return Err(Error::Shape(format!("{} ensembles for {} observations", members.len(), obs.len())));
    }
    let mut total = 0.0;
    for (ens, &o) in members.iter().zip(obs) {
        if ens.is_empty() {
            return Err(Error::Shape("empty ensemble".into()));
        }
        let mut s = ens.clone();
        s.sort_by(f64::total_cmp);
        total += crps_point(&s, o, CrpsEstimator::Biased);
    }
    Ok(total / obs.len() as f64)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Shape("empty input".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", pred.len(), truth.len())));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Spread over skill: `sqrt(mean unbiased ensemble variance) / rmse(ensemble mean)`.
pub fn ssr(members: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    if members.len() != truth.len() || members.is_empty() {
        return Err(Error::Shape(format!("{} ensembles for {} truths", members.len(), truth.len())));
    }
    let mut var_sum = 0.0;
    let mut means = Vec::with_capacity(truth.len());
    for ens in members {
        let m = ens.len();
        if m < 2 {
            return Err(Error::Usage(format!("spread is undefined for an ensemble of {m}")));
        }
        let mean = ens.iter().sum::<f64>() / m as f64;
        var_sum += ens.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        means.push(mean);
    }
    let spread = (var_sum / truth.len() as f64).sqrt();
    Ok(spread / rmse(&means, truth)?)
}

/// One test case: `m` members of a `[C, H, W]` field and the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleBatch {
    pub members: Vec<f64>,
    pub truth: Vec<f64>,
    pub m: usize,
    pub channels: usize,
}

impl EnsembleBatch {
    pub fn new(members: Vec<f64>, truth: Vec<f64>, m: usize, channels: usize) -> Result<Self> {
        if m == 0 || channels == 0 || truth.len() % channels != 0 || members.len() != m * truth.len() {
            return Err(Error::Shape(format!(
                "{} member values for m = {m} and a truth of {}",
                members.len(),
                truth.len()
            )));
        }
        Ok(Self { members, truth, m, channels })
    }

    pub fn pixels(&self) -> usize {
        self.truth.len() / self.channels
    }

    pub fn member(&self, i: usize) -> &[f64] {
        let n = self.truth.len();
        &self.members[i * n..(i + 1) * n]
    }

    /// Per-channel pixel means of (squared error of mean, abs error of mean,
    /// CRPS, unbiased ensemble variance).
    pub(crate) fn channel_sums(&self, estimator: CrpsEstimator) -> Vec<[f64; 4]> {
        let (n, p) = (self.truth.len(), self.pixels());
        let mut out = vec![[0.0; 4]; self.channels];
        let mut ens = vec![0.0; self.m];
        for c in 0..self.channels {
            let acc = &mut out[c];
            for q in c * p..(c + 1) * p {
                for (i, e) in ens.iter_mut().enumerate() {
                    *e = self.members[i * n + q];
                }
                let mean = ens.iter().sum::<f64>() / self.m as f64;
                let t = self.truth[q];
                acc[0] += (mean - t).powi(2);
                acc[1] += (mean - t).abs();
                if self.m > 1 {
                    acc[3] += ens.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (self.m - 1) as f64;
                }
                ens.sort_by(f64::total_cmp);
                acc[2] += crps_point(&ens, t, estimator);
            }
            for v in acc.iter_mut() {
                *v /= p as f64;
            }
        }
        out
    }
}
