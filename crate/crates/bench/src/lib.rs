//! Fixtures shared by the benchmarks.

use sfm_core::rng;
use sfm_core::tensor::{ConvNetSpec, Tensor};

/// Standard normal tensor.
pub fn normal_tensor(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut t = Tensor::zeros(shape);
    rng::fill_normal(&mut rng::stream(seed, "bench", 0), t.data_mut());
    t
}

/// The desk-scale denoiser: 1 channel in and out, noise embedding on.
pub fn denoiser(hidden: usize, blocks: usize) -> ConvNetSpec {
    ConvNetSpec {
        in_channels: 1,
        out_channels: 1,
        hidden_channels: hidden,
        n_blocks: blocks,
        kernel_size: 3,
        use_sigma_embedding: true,
        use_positional_channels: true,
        dropout: 0.0,
    }
}

/// `points` ensembles of `m` members and one observation each.
pub fn ensembles(seed: u64, points: usize, m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng::stream(seed, "bench/ensembles", 0);
    let members = (0..points).map(|_| (0..m).map(|_| rng::normal(&mut r)).collect()).collect();
    let obs = (0..points).map(|_| rng::normal(&mut r)).collect();
    (members, obs)
}
