//! Run directories: training loop, checkpoints, logs and ensemble sampling.
//!
//! ```text
//! run/
//!   config.json          TrainConfig with scheme defaults expanded
//!   train_log.csv        one TrainRecord per step
//!   validation.csv       step,rmse of the deterministic part on test cases
//!   checkpoints/*.ckpt   live + EMA weights per network
//!   timing.json          wall-clock seconds (the only non-reproducible file)
//!   manifest.json        RunManifest, written last
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Scheme, SchemeConfig, TrainRecord};
use super::model::Downscaler;
use super::noise::purpose;
use crate::data::{epoch_batches, Batch, Dataset, Normalization};
use crate::rng::{self, StreamRng};
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Tensor};
use crate::{Error, Result};

pub const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: SchemeConfig,
    pub batch_size: usize,
    pub n_train_steps: u64,
    pub checkpoint_every: u64,
    pub validate_every: u64,
    /// Test cases used for the validation RMSE log.
    pub n_validation: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeConfig::default(),
            batch_size: 4,
            n_train_steps: 5000,
            checkpoint_every: 1000,
            validate_every: 250,
            n_validation: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        if self.batch_size == 0 || self.n_train_steps == 0 {
            return Err(Error::Config("batch_size and n_train_steps must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return Err(Error::Config("checkpoint_every and validate_every must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved(&self) -> Self {
        Self { scheme: self.scheme.resolved(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub scheme: Scheme,
    pub in_channels: usize,
    pub out_channels: usize,
    pub grid_n: usize,
    pub tau: f64,
    pub steps_done: u64,
    pub normalization: Normalization,
    /// `(step, sigma_z)` after every validation interval (SFM only).
    pub sigma_z_history: Vec<(u64, f64)>,
    pub validation_rmse: Vec<(u64, f64)>,
    pub state: serde_json::Value,
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let m: Self = serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format_version != RUN_FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format_version {}", m.format_version)));
        }
        Ok(m)
    }
}

fn save_all(model: &dyn Downscaler<f32>, dir: &Path, seed: u64, step: u64) -> Result<Vec<String>> {
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let mut names = Vec::new();
    for (name, net) in model.networks() {
        let file = format!("{name}.ckpt");
        let ck = Checkpoint {
            spec: serde_json::to_value(&net.spec)?,
            rng: serde_json::json!({ "seed": seed, "step": step }),
            extra: model.state(),
            live: net.params.clone(),
            ema: net.ema.clone(),
        };
        save_checkpoint(&ck_dir.join(&file), &ck)?;
        names.push(format!("checkpoints/{file}"));
    }
    Ok(names)
}

/// Train `cfg.scheme` on `data` and write the run directory.
///
/// `progress` is called after every step with the step's record.
pub fn train_run(
    data: &Dataset,
    cfg: &TrainConfig,
    dir: &Path,
    mut progress: impl FnMut(&TrainRecord),
) -> Result<RunManifest> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    if cfg.batch_size > data.n_train() {
        return Err(Error::Config(format!("batch size {} exceeds {} training pairs", cfg.batch_size, data.n_train())));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let (cin, cout) = (data.in_channels(), data.out_channels());
    let mut model = super::build_model::<f32>(&cfg.scheme, cin, cout, cfg.seed)?;

    let train_all = Batch { y: data.y_train.clone(), x: data.x_train.clone() };
    let n_val = cfg.n_validation.min(data.n_test());
    let val = data.test_batch(&(0..n_val).collect::<Vec<_>>())?;
    let mut log = BufWriter::new(fs::File::create(dir.join("train_log.csv"))?);
    writeln!(log, "{}", TrainRecord::CSV_HEADER)?;
    let mut val_log = BufWriter::new(fs::File::create(dir.join("validation.csv"))?);
    writeln!(val_log, "step,rmse")?;

    let per_epoch = data.n_train().div_ceil(cfg.batch_size) as u64;
    let mut epoch_order: Option<(u64, Vec<Vec<usize>>)> = None;
    let mut sigma_hist = Vec::new();
    let mut val_hist = Vec::new();
    let started = Instant::now();
    let total = cfg.n_train_steps;
    for step in 0..total {
        let epoch = step / per_epoch;
        if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_order = Some((epoch, epoch_batches(data.n_train(), cfg.batch_size, cfg.seed, epoch)?));
        }
        let idx = &epoch_order.as_ref().expect("set above").1[(step % per_epoch) as usize];
        let batch = data.train_batch(idx)?;
        model.on_step_start(step, total, &train_all)?;
        let rec = match model.train_step(&batch, step) {
            Ok(r) => r,
            Err(e) => {
                writeln!(log, "# aborted at step {step}: {e}")?;
                log.flush()?;
                return Err(e);
            }
        };
        writeln!(log, "{}", rec.csv_row())?;
        progress(&rec);
        let done = step + 1;
        if done % cfg.validate_every == 0 || done == total {
            if let Some(r) = model.validation_rmse(&val) {
                let r = r?;
                writeln!(val_log, "{done},{r}")?;
                val_hist.push((done, r));
            }
            if rec.sigma_z.is_finite() {
                sigma_hist.push((done, rec.sigma_z));
            }
        }
        if done % cfg.checkpoint_every == 0 && done != total {
            save_all(model.as_ref(), dir, cfg.seed, done)?;
        }
    }
    log.flush()?;
    val_log.flush()?;
    let checkpoints = save_all(model.as_ref(), dir, cfg.seed, total)?;
    let manifest = RunManifest {
        format_version: RUN_FORMAT_VERSION,
        scheme: cfg.scheme.scheme,
        in_channels: cin,
        out_channels: cout,
        grid_n: data.grid_n(),
        tau: data.manifest.tau,
        steps_done: total,
        normalization: data.manifest.normalization.clone(),
        sigma_z_history: sigma_hist,
        validation_rmse: val_hist,
        state: model.state(),
        checkpoints,
    };
    let timing = serde_json::json!({ "train_seconds": started.elapsed().as_secs_f64() });
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Rebuild a trained model from its run directory.
pub fn load_run(dir: &Path) -> Result<(TrainConfig, RunManifest, Box<dyn Downscaler<f32>>)> {
    let manifest = RunManifest::read(dir)?;
    let cfg_path = dir.join("config.json");
    let cfg: TrainConfig =
        serde_json::from_slice(&fs::read(&cfg_path)?).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
    let mut model = super::build_model::<f32>(&cfg.scheme, manifest.in_channels, manifest.out_channels, cfg.seed)?;
    for (name, net) in model.networks_mut() {
        let path = dir.join("checkpoints").join(format!("{name}.ckpt"));
        let ck: Checkpoint<f32> = load_checkpoint(&path)?;
        ck.live.check_compatible(&net.params).map_err(|e| Error::format(&path, e.to_string()))?;
        net.params = ck.live;
        net.ema = ck.ema;
    }
    model.set_state(&manifest.state)?;
    Ok((cfg, manifest, model))
}

/// The generator of ensemble member `member` for test case `case`.
pub fn sample_stream(seed: u64, case: usize, member: usize) -> StreamRng {
    rng::stream(seed, purpose::SAMPLE, ((case as u64) << 24) | member as u64)
}

/// Generate `m` members for each test case in `cases` and return them
/// denormalized as `[cases.len(), m, C, H, W]`.
///
/// Members are drawn in chunks of `chunk` per forward pass; each member's
/// noise depends only on `(seed, case, member)`.
pub fn sample_cases(
    model: &dyn Downscaler<f32>,
    data: &Dataset,
    cases: &[usize],
    m: usize,
    seed: u64,
    chunk: usize,
    mut progress: impl FnMut(usize),
) -> Result<Tensor<f32>> {
    if cases.is_empty() {
        return Err(Error::Config("no test cases selected".into()));
    }
    if let Some(&bad) = cases.iter().find(|&&c| c >= data.n_test()) {
        return Err(Error::Config(format!("test case {bad} outside 0..{}", data.n_test())));
    }
    if m == 0 || chunk == 0 {
        return Err(Error::Config("m and chunk must be positive".into()));
    }
    let norm = &data.manifest.normalization;
    let mut out = Vec::with_capacity(cases.len());
    for (done, &case) in cases.iter().enumerate() {
        let y = data.y_test.slice_batch(case, case + 1)?;
        let mut members = Vec::new();
        for start in (0..m).step_by(chunk) {
            let end = (start + chunk).min(m);
            let mut rngs: Vec<StreamRng> = (start..end).map(|k| sample_stream(seed, case, k)).collect();
            let s = model.sample(&y.repeat_each(end - start), &mut rngs)?;
            members.push(norm.x.denormalize(&s)?);
        }
        let case_t = Tensor::stack(&members)?;
        let mut shape = vec![1];
        shape.extend_from_slice(case_t.shape());
        out.push(case_t.reshape(&shape)?);
        progress(done + 1);
    }
    Tensor::stack(&out)
}
