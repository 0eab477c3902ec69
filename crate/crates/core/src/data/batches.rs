use super::Dataset;
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// A normalized minibatch: conditioning `y [B,Cin,H,W]`, target `x [B,C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub y: Tensor<T>,
    pub x: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch { y: self.y.cast(), x: self.x.cast() }
    }
}

/// Index lists for one epoch: a permutation of `0..n` keyed by
/// `(seed, epoch)`, cut into batches; the final short batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in 1..={n}"
        )));
    }
    let mut r = rng::stream(seed, "shuffle", epoch);
    let perm = rng::permutation(&mut r, n);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered shape")
}

impl Dataset {
    pub fn train_batch(&self, idx: &[usize]) -> Result<Batch<f32>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n_train()) {
            return Err(Error::Data(format!("train index {bad} out of range")));
        }
        Ok(Batch { y: gather(&self.y_train, idx), x: gather(&self.x_train, idx) })
    }

    pub fn test_batch(&self, idx: &[usize]) -> Result<Batch<f32>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n_test()) {
            return Err(Error::Data(format!("test index {bad} out of range")));
        }
        Ok(Batch { y: gather(&self.y_test, idx), x: gather(&self.x_test, idx) })
    }

    /// Batches of one training epoch, in order.
    pub fn minibatches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch<f32>>> {
        self.manifest.check_disjoint()?;
        epoch_batches(self.n_train(), batch_size, seed, epoch)?
            .iter()
            .map(|idx| self.train_batch(idx))
            .collect()
    }
}
