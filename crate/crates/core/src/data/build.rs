use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{ChannelStats, DatasetManifest, FileEntry, Normalization, PairRef, SourceRef, DATASET_FORMAT_VERSION};
use crate::spectral::{sha256_file, SimManifest, Trajectory};
use crate::{npy, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Snapshots skipped between the train and test ranges of a trajectory.
    pub gap: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { n_train: 2000, n_test: 200, gap: 5 }
    }
}

/// Per-trajectory `(train range, test range)` as half-open snapshot indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub per_source: Vec<([usize; 2], [usize; 2])>,
}

fn spread(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Spread the requested counts evenly across trajectories with
/// `snapshot_counts[i]` snapshots each.
pub fn plan_split(snapshot_counts: &[usize], split: &SplitSpec) -> Result<SplitPlan> {
    if snapshot_counts.is_empty() {
        return Err(Error::Data("no trajectories given".into()));
    }
    if split.n_train == 0 || split.n_test == 0 {
        return Err(Error::Config("n_train and n_test must be positive".into()));
    }
    if split.gap == 0 {
        return Err(Error::Config("the train/test gap must be at least one snapshot".into()));
    }
    let k = snapshot_counts.len();
    let trains = spread(split.n_train, k);
    let tests = spread(split.n_test, k);
    let mut per_source = Vec::with_capacity(k);
    for (i, &s) in snapshot_counts.iter().enumerate() {
        let need = trains[i] + split.gap + tests[i];
        if need > s {
            return Err(Error::Data(format!(
                "trajectory {i} has {s} snapshots, {need} needed for {} train + gap {} + {} test",
                trains[i], split.gap, tests[i]
            )));
        }
        per_source.push(([0, trains[i]], [s - tests[i], s]));
    }
    Ok(SplitPlan { per_source })
}

/// Assemble the dataset directory from loaded trajectories.
///
/// Writes raw (unnormalized) `y_*.npy` / `x_*.npy` arrays shaped
/// `[N, 1, n, n]` and `manifest.json` with train-split statistics.
pub fn build_dataset(
    sources: &[(SimManifest, Trajectory)],
    split: &SplitSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let first = &sources.first().ok_or_else(|| Error::Data("no trajectories given".into()))?.0;
    let (n, tau) = (first.config.grid_n, first.config.tau);
    for (m, t) in sources {
        if m.config.grid_n != n || t.grid_n != n {
            return Err(Error::Data("trajectories use different grids".into()));
        }
        if m.config.tau != tau {
            return Err(Error::Data(format!(
                "trajectories mix tau = {} and tau = {}",
                tau, m.config.tau
            )));
        }
    }
    let counts: Vec<usize> = sources.iter().map(|(_, t)| t.snapshots.len()).collect();
    let plan = plan_split(&counts, split)?;

    let n2 = n * n;
    let mut y = [Vec::new(), Vec::new()];
    let mut x = [Vec::new(), Vec::new()];
    let mut pairs = [Vec::new(), Vec::new()];
    let mut refs = Vec::new();
    for (si, ((m, t), (tr, te))) in sources.iter().zip(&plan.per_source).enumerate() {
        for (split_i, range) in [tr, te].into_iter().enumerate() {
            for idx in range[0]..range[1] {
                let s = &t.snapshots[idx];
                y[split_i].extend(s.zeta_l.iter().map(|&v| v as f32));
                x[split_i].extend(s.zeta_h.iter().map(|&v| v as f32));
                pairs[split_i].push(PairRef { source: si, index: idx, time: s.time });
            }
        }
        let manifest_sha = {
            use sha2::{Digest, Sha256};
            hex::encode(Sha256::digest(serde_json::to_vec(m)?))
        };
        refs.push(SourceRef {
            seed: m.seed,
            tau: m.config.tau,
            manifest_sha256: manifest_sha,
            n_snapshots: t.snapshots.len(),
            train_range: *tr,
            test_range: *te,
        });
    }
    let n_train = pairs[0].len();
    let n_test = pairs[1].len();
    debug_assert_eq!(y[0].len(), n_train * n2);

    let norm = Normalization {
        y: ChannelStats::compute(&[n_train, 1, n, n], &y[0])?,
        x: ChannelStats::compute(&[n_train, 1, n, n], &x[0])?,
    };

    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for (name, data, count) in [
        ("y_train.npy", &y[0], n_train),
        ("x_train.npy", &x[0], n_train),
        ("y_test.npy", &y[1], n_test),
        ("x_test.npy", &x[1], n_test),
    ] {
        let shape = vec![count, 1, n, n];
        let path = out_dir.join(name);
        npy::write_file(&path, &shape, data)?;
        files.push(FileEntry { name: name.into(), shape, sha256: sha256_file(&path)? });
    }
    let [train_pairs, test_pairs] = pairs;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        tau,
        grid_n: n,
        n_train,
        n_test,
        gap: split.gap,
        normalization: norm,
        files,
        sources: refs,
        train_pairs,
        test_pairs,
    };
    manifest.check_disjoint()?;
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trajectory_bookkeeping() {
        let plan = plan_split(&[20], &SplitSpec { n_train: 10, n_test: 5, gap: 5 }).unwrap();
        assert_eq!(plan.per_source, vec![([0, 10], [15, 20])]);
    }

    #[test]
    fn counts_spread_over_trajectories() {
        let plan = plan_split(&[30, 30, 30], &SplitSpec { n_train: 10, n_test: 4, gap: 5 }).unwrap();
        let trains: Vec<usize> = plan.per_source.iter().map(|(a, _)| a[1] - a[0]).collect();
        let tests: Vec<usize> = plan.per_source.iter().map(|(_, b)| b[1] - b[0]).collect();
        assert_eq!(trains, vec![4, 3, 3]);
        assert_eq!(tests, vec![2, 1, 1]);
        for (tr, te) in &plan.per_source {
            assert!(te[0] >= tr[1] + 5);
        }
    }

    #[test]
    fn insufficient_snapshots() {
        assert!(matches!(
            plan_split(&[19], &SplitSpec { n_train: 10, n_test: 5, gap: 5 }),
            Err(Error::Data(_))
        ));
    }
}
