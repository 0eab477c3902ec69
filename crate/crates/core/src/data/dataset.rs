use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::spectral::sha256_file;
use crate::tensor::{Real, Tensor};
use crate::{npy, Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Stats of a `[N, C, H, W]` array, accumulated in f64.
    pub fn compute(shape: &[usize], data: &[f32]) -> Result<Self> {
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::Data(format!("cannot compute stats of shape {shape:?}")));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| data[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter());
            let count = (n * hw) as f64;
            let m = vals.clone().map(|&v| f64::from(v)).sum::<f64>() / count;
            let var = vals.map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = var.sqrt().max(1e-12);
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn apply<T: Real>(&self, t: &Tensor<T>, forward: bool) -> Result<Tensor<T>> {
        let s = t.shape();
        if s.len() < 3 || s[s.len() - 3] != self.channels() {
            return Err(Error::Shape(format!(
                "{} channel stats for tensor {s:?}",
                self.channels()
            )));
        }
        let c = self.channels();
        let hw = s[s.len() - 2] * s[s.len() - 1];
        let mut out = t.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            let (m, sd) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                let x = v.as_f64();
                *v = T::from_f64(if forward { (x - m) / sd } else { x * sd + m });
            }
        }
        Ok(out)
    }

    /// `(t - mean) / std` per channel; the channel axis is third from last.
    pub fn normalize<T: Real>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(t, true)
    }

    pub fn denormalize<T: Real>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(t, false)
    }
}

/// Normalization for conditioning `y` and target `x`, from the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub y: ChannelStats,
    pub x: ChannelStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

/// Which trajectory a split drew from. Paths are not stored so the dataset
/// directory stays relocatable; the source manifest hash identifies it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub seed: u64,
    pub tau: f64,
    pub manifest_sha256: String,
    pub n_snapshots: usize,
    pub train_range: [usize; 2],
    pub test_range: [usize; 2],
}

/// Origin of one pair: source trajectory, snapshot index and model time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRef {
    pub source: usize,
    pub index: usize,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub tau: f64,
    pub grid_n: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub gap: usize,
    pub normalization: Normalization,
    pub files: Vec<FileEntry>,
    pub sources: Vec<SourceRef>,
    pub train_pairs: Vec<PairRef>,
    pub test_pairs: Vec<PairRef>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let m: Self = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format_version {}", m.format_version)));
        }
        Ok(m)
    }

    /// No `(source, index)` appears in both splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: std::collections::HashSet<(usize, usize)> =
            self.train_pairs.iter().map(|p| (p.source, p.index)).collect();
        if let Some(p) = self.test_pairs.iter().find(|p| train.contains(&(p.source, p.index))) {
            return Err(Error::Data(format!(
                "snapshot {} of source {} is in both splits",
                p.index, p.source
            )));
        }
        Ok(())
    }
}

/// A loaded dataset, normalized in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub y_train: Tensor<f32>,
    pub x_train: Tensor<f32>,
    pub y_test: Tensor<f32>,
    pub x_test: Tensor<f32>,
}

impl Dataset {
    /// Load and normalize; every file hash is checked first.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        manifest.check_disjoint()?;
        let mut arrays = std::collections::BTreeMap::new();
        for f in &manifest.files {
            let path = dir.join(&f.name);
            if sha256_file(&path)? != f.sha256 {
                return Err(Error::format(&path, "content hash does not match manifest"));
            }
            let arr = npy::read_file(&path)?;
            if arr.shape != f.shape {
                return Err(Error::format(&path, format!("shape {:?}, manifest says {:?}", arr.shape, f.shape)));
            }
            arrays.insert(f.name.clone(), Tensor::new(arr.shape, arr.data)?);
        }
        let mut take = |name: &str| {
            arrays
                .remove(name)
                .ok_or_else(|| Error::format(dir.join("manifest.json"), format!("no file entry {name}")))
        };
        let norm = &manifest.normalization;
        let y_train = norm.y.normalize(&take("y_train.npy")?)?;
        let x_train = norm.x.normalize(&take("x_train.npy")?)?;
        let y_test = norm.y.normalize(&take("y_test.npy")?)?;
        let x_test = norm.x.normalize(&take("x_test.npy")?)?;
        if y_train.shape()[0] != manifest.n_train || y_test.shape()[0] != manifest.n_test {
            return Err(Error::Data("split sizes disagree with manifest".into()));
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, y_train, x_train, y_test, x_test })
    }

    pub fn n_train(&self) -> usize {
        self.manifest.n_train
    }

    pub fn n_test(&self) -> usize {
        self.manifest.n_test
    }

    pub fn in_channels(&self) -> usize {
        self.y_train.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.x_train.shape()[1]
    }

    pub fn grid_n(&self) -> usize {
        self.manifest.grid_n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_roundtrip() {
        let data: Vec<f32> = (0..2 * 2 * 9).map(|i| (i as f32 * 0.37).sin() * 5.0 + 2.0).collect();
        let stats = ChannelStats::compute(&[2, 2, 3, 3], &data).unwrap();
        let t = Tensor::new(vec![2, 2, 3, 3], data).unwrap();
        let back = stats.denormalize(&stats.normalize(&t).unwrap()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn normalized_stats() {
        let data: Vec<f32> = (0..4 * 16).map(|i| ((i * 7919) % 101) as f32 - 30.0).collect();
        let stats = ChannelStats::compute(&[4, 1, 4, 4], &data).unwrap();
        let t = Tensor::new(vec![4, 1, 4, 4], data).unwrap();
        let z: Tensor<f64> = stats.normalize(&t.cast()).unwrap();
        let n = z.numel() as f64;
        let mean = z.data().iter().sum::<f64>() / n;
        let std = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-3);
    }
}
