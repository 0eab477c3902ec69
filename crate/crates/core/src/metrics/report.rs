use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scores::{CrpsEstimator, EnsembleBatch};
use crate::spectral::radial_power_spectrum;
use crate::{Error, Result};

pub const AGGREGATION_ORDER: &str = "pixel scores -> mean over pixels -> mean over cases, per channel";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    pub variable: String,
    pub rmse: f64,
    pub mae: f64,
    pub crps: f64,
    /// Root mean ensemble variance; zero for a single member.
    pub spread: f64,
    /// Undefined for single-member (deterministic) predictions.
    pub ssr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpectrum {
    pub variable: String,
    pub k: Vec<usize>,
    pub power_truth: Vec<f64>,
    /// Mean over members and cases of each member's spectrum.
    pub power_pred_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub scheme: String,
    pub n_cases: usize,
    pub m: usize,
    pub crps_estimator: CrpsEstimator,
    pub spread_normalization: String,
    pub aggregation: String,
    pub channels: Vec<ChannelScores>,
    pub spectra: Vec<ChannelSpectrum>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub scheme: String,
    pub channel_names: Vec<String>,
    pub m: usize,
    pub estimator: CrpsEstimator,
    pub spectra: bool,
}

/// Score `samples` (`[n_inputs, n_members, C, H, W]`, physical units) against
/// `truth` (`[N, C, H, W]`) using the first `opts.m` members of each case.
pub fn evaluate(
    samples: &[f32],
    sample_shape: &[usize],
    truth: &[f32],
    truth_shape: &[usize],
    opts: &EvalOptions,
) -> Result<SkillReport> {
    if sample_shape.len() != 5 || truth_shape.len() != 4 {
        return Err(Error::Shape(format!("samples {sample_shape:?} vs truth {truth_shape:?}")));
    }
    let (n, c, h, w) = (truth_shape[0], truth_shape[1], truth_shape[2], truth_shape[3]);
    let (ns, ms) = (sample_shape[0], sample_shape[1]);
    if sample_shape[2..] != truth_shape[1..] {
        return Err(Error::Shape(format!("sample field {:?} vs truth field {:?}", &sample_shape[2..], &truth_shape[1..])));
    }
    let mut gaps = Vec::new();
    if ns < n {
        gaps.push(format!("test cases {ns}..{n} have no samples"));
    }
    if ms < opts.m {
        gaps.push(format!("{ms} members per case, {} requested", opts.m));
    }
    if opts.m == 0 {
        gaps.push("m must be positive".into());
    }
    if !gaps.is_empty() {
        return Err(Error::Data(format!("incomplete samples: {}", gaps.join("; "))));
    }
    if opts.channel_names.len() != c {
        return Err(Error::Config(format!("{} channel names for {c} channels", opts.channel_names.len())));
    }
    if opts.spectra && h != w {
        return Err(Error::Shape("spectra need square fields".into()));
    }
    let field = c * h * w;
    let per_case: Vec<(Vec<[f64; 4]>, Vec<(Vec<f64>, Vec<f64>)>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = i * ms * field;
            let members: Vec<f64> = samples[base..base + opts.m * field].iter().map(|&v| f64::from(v)).collect();
            let t: Vec<f64> = truth[i * field..(i + 1) * field].iter().map(|&v| f64::from(v)).collect();
            let batch = EnsembleBatch::new(members, t, opts.m, c).expect("shapes checked");
            let sums = batch.channel_sums(opts.estimator);
            let spectra = if opts.spectra {
                (0..c)
                    .map(|ch| {
                        let sl = |v: &[f64]| v[ch * h * w..(ch + 1) * h * w].to_vec();
                        let tp: Vec<f64> = radial_power_spectrum(&sl(&batch.truth), h).iter().map(|b| b.power).collect();
                        let mut pp = vec![0.0; tp.len()];
                        for k in 0..opts.m {
                            for (a, b) in pp.iter_mut().zip(radial_power_spectrum(&sl(batch.member(k)), h)) {
                                *a += b.power / opts.m as f64;
                            }
                        }
                        (tp, pp)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (sums, spectra)
        })
        .collect();

    let mut channels = Vec::with_capacity(c);
    for ch in 0..c {
        let mut acc = [0.0; 4];
        for (sums, _) in &per_case {
            for (a, b) in acc.iter_mut().zip(&sums[ch]) {
                *a += b;
            }
        }
        let [mse, mae, crps, var] = acc.map(|v| v / n as f64);
        let rmse = mse.sqrt();
        let spread = var.sqrt();
        let ssr = (opts.m > 1).then(|| if rmse > 0.0 { spread / rmse } else { 0.0 });
        for (name, v) in [("rmse", rmse), ("mae", mae), ("crps", crps), ("spread", spread)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} of channel {}", opts.channel_names[ch])));
            }
        }
        channels.push(ChannelScores { variable: opts.channel_names[ch].clone(), rmse, mae, crps, spread, ssr });
    }

    let mut spectra = Vec::new();
    if opts.spectra {
        for ch in 0..c {
            let bins = per_case[0].1[ch].0.len();
            let mut tp = vec![0.0; bins];
            let mut pp = vec![0.0; bins];
            for (_, s) in &per_case {
                for k in 0..bins {
                    tp[k] += s[ch].0[k] / n as f64;
                    pp[k] += s[ch].1[k] / n as f64;
                }
            }
            spectra.push(ChannelSpectrum {
                variable: opts.channel_names[ch].clone(),
                k: (0..bins).collect(),
                power_truth: tp,
                power_pred_mean: pp,
            });
        }
    }

    Ok(SkillReport {
        scheme: opts.scheme.clone(),
        n_cases: n,
        m: opts.m,
        crps_estimator: opts.estimator,
        spread_normalization: "unbiased (m - 1)".into(),
        aggregation: AGGREGATION_ORDER.into(),
        channels,
        spectra,
        metadata: BTreeMap::new(),
    })
}

impl SkillReport {
    /// Long-format rows `variable,metric,scheme,value`. SSR is omitted for
    /// single-member predictions.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variable,metric,scheme,value\n");
        for c in &self.channels {
            for (metric, v) in [("rmse", Some(c.rmse)), ("crps", Some(c.crps)), ("mae", Some(c.mae)), ("ssr", c.ssr)] {
                if let Some(v) = v {
                    let _ = writeln!(s, "{},{},{},{}", c.variable, metric, self.scheme, v);
                }
            }
        }
        s
    }

    /// `k_bin,power,series` rows, series `truth:<var>` and `<scheme>:<var>`.
    pub fn spectra_csv(&self) -> String {
        let mut s = String::from("k_bin,power,series\n");
        for sp in &self.spectra {
            for (k, p) in sp.k.iter().zip(&sp.power_truth) {
                let _ = writeln!(s, "{k},{p},truth:{}", sp.variable);
            }
            for (k, p) in sp.k.iter().zip(&sp.power_pred_mean) {
                let _ = writeln!(s, "{k},{p},{}:{}", self.scheme, sp.variable);
            }
        }
        s
    }

    pub fn channel(&self, variable: &str) -> Option<&ChannelScores> {
        self.channels.iter().find(|c| c.variable == variable)
    }
}

/// Write `report.csv`, `report.json` and `spectra.csv` into `dir`.
pub fn write_report(dir: &Path, report: &SkillReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("spectra.csv"), report.spectra_csv())?;
    Ok(())
}

/// Wide comparison table: one row per (variable, metric), one column per
/// (tau, scheme). Missing cells are written as `-`.
pub fn skill_table_csv(reports: &[(f64, SkillReport)], schemes: &[&str]) -> String {
    let mut taus: Vec<f64> = reports.iter().map(|(t, _)| *t).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut variables: Vec<String> = Vec::new();
    for (_, r) in reports {
        for c in &r.channels {
            if !variables.contains(&c.variable) {
                variables.push(c.variable.clone());
            }
        }
    }
    let mut s = String::from("variable,metric");
    for t in &taus {
        for sc in schemes {
            let _ = write!(s, ",tau={t}:{sc}");
        }
    }
    s.push('\n');
    for var in &variables {
        for metric in ["RMSE", "CRPS", "MAE", "SSR"] {
            let _ = write!(s, "{var},{metric}");
            for t in &taus {
                for sc in schemes {
                    let cell = reports
                        .iter()
                        .find(|(rt, r)| rt == t && r.scheme == *sc)
                        .and_then(|(_, r)| r.channel(var))
                        .and_then(|c| match metric {
                            "RMSE" => Some(c.rmse),
                            "CRPS" => (c.ssr.is_some()).then_some(c.crps),
                            "MAE" => Some(c.mae),
                            _ => c.ssr,
                        });
                    match cell {
                        Some(v) => {
                            let _ = write!(s, ",{v:.4}");
                        }
                        None => s.push_str(",-"),
                    }
                }
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn opts(m: usize) -> EvalOptions {
        EvalOptions {
            scheme: "SFM".into(),
            channel_names: vec!["zeta_h".into()],
            m,
            estimator: CrpsEstimator::Biased,
            spectra: true,
        }
    }

    #[test]
    fn replicated_truth_scores_zero() {
        let n = 8;
        let truth: Vec<f32> = (0..2 * n * n).map(|i| (i as f32 * 0.1).sin()).collect();
        let mut samples = Vec::new();
        for case in 0..2 {
            for _ in 0..3 {
                samples.extend_from_slice(&truth[case * n * n..(case + 1) * n * n]);
            }
        }
        let r = evaluate(&samples, &[2, 3, 1, n, n], &truth, &[2, 1, n, n], &opts(3)).unwrap();
        let c = &r.channels[0];
        assert_eq!((c.rmse, c.mae, c.crps, c.ssr), (0.0, 0.0, 0.0, Some(0.0)));
        let sp = &r.spectra[0];
        for (a, b) in sp.power_truth.iter().zip(&sp.power_pred_mean) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn crps_below_member_mae_and_rmse_above_mae() {
        let (n, m, cases) = (8, 4, 3);
        let mut r = rng::stream(0, "test", 0);
        let mut truth = vec![0.0f32; cases * n * n];
        let mut samples = vec![0.0f32; cases * m * n * n];
        rng::fill_normal(&mut r, &mut truth);
        rng::fill_normal(&mut r, &mut samples);
        let rep = evaluate(&samples, &[cases, m, 1, n, n], &truth, &[cases, 1, n, n], &opts(m)).unwrap();
        let member_mae: f64 = (0..cases)
            .flat_map(|c| (0..m).map(move |k| (c, k)))
            .map(|(c, k)| {
                (0..n * n)
                    .map(|p| (samples[(c * m + k) * n * n + p] - truth[c * n * n + p]).abs() as f64)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (cases * m * n * n) as f64;
        let ch = &rep.channels[0];
        assert!(ch.crps <= member_mae);
        assert!(ch.rmse >= ch.mae);
    }

    #[test]
    fn coverage_gaps_are_named() {
        let err = evaluate(&[0.0; 16], &[1, 1, 1, 4, 4], &[0.0; 32], &[2, 1, 4, 4], &opts(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test cases 1..2") && msg.contains("1 members per case"), "{msg}");
    }

    #[test]
    fn deterministic_report_skips_ssr() {
        let r = evaluate(&[1.0; 16], &[1, 1, 1, 4, 4], &[0.0; 16], &[1, 1, 4, 4], &opts(1)).unwrap();
        assert_eq!(r.channels[0].crps, r.channels[0].mae);
        assert!(r.channels[0].ssr.is_none());
        assert!(!r.to_csv().contains(",ssr,"));
    }

    #[test]
    fn table_layout() {
        let mk = |scheme: &str, ssr: Option<f64>| SkillReport {
            scheme: scheme.into(),
            n_cases: 1,
            m: 2,
            crps_estimator: CrpsEstimator::Biased,
            spread_normalization: String::new(),
            aggregation: String::new(),
            channels: vec![ChannelScores { variable: "zeta_h".into(), rmse: 1.0, mae: 0.5, crps: 0.4, spread: 0.1, ssr }],
            spectra: vec![],
            metadata: BTreeMap::new(),
        };
        let reports = vec![(3.0, mk("SFM", Some(0.6))), (10.0, mk("Regression", None))];
        let t = skill_table_csv(&reports, &["SFM", "Regression"]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "variable,metric,tau=3:SFM,tau=3:Regression,tau=10:SFM,tau=10:Regression");
        assert_eq!(lines[1], "zeta_h,RMSE,1.0000,-,-,1.0000");
        assert_eq!(lines[2], "zeta_h,CRPS,0.4000,-,-,-");
        assert_eq!(lines[4], "zeta_h,SSR,0.6000,-,-,-");
    }
}
