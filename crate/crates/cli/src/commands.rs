use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfm_core::data::{build_dataset, Dataset, DatasetManifest, SplitSpec};
use sfm_core::flows::{load_run, sample_cases, train_run, Scheme, TrainConfig};
use sfm_core::metrics::{self, CrpsEstimator, EvalOptions, SkillReport};
use sfm_core::spectral::{read_trajectory, run_trajectory, sha256_file, write_trajectory, SimConfig};
use sfm_core::{npy, Error};

use crate::output::{is_complete, load_config, write_json, Staged};
use crate::{BuildArgs, EstimatorArg, EvaluateArgs, GlobalArgs, SampleArgs, SimulateArgs, TableArgs, TrainArgs};

pub const SAMPLES_FORMAT_VERSION: u32 = 1;
const CHANNEL_NAMES: [&str; 1] = ["vorticity"];

fn tau_dir(tau: f64) -> String {
    format!("tau{tau}")
}

fn scheme_dir(s: Scheme) -> String {
    s.name().to_lowercase()
}

fn need<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("{what} is required here")).into())
}

/// Configuration of `simulate`: one trajectory per `(tau, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub sim: SimConfig,
    pub taus: Vec<f64>,
    /// Trajectory `i` uses seed `sim.seed + i`, shared across taus.
    pub n_seeds: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { sim: SimConfig::default(), taus: vec![3.0, 5.0, 10.0], n_seeds: 8 }
    }
}

pub fn simulate(g: &GlobalArgs, a: &SimulateArgs) -> Result<()> {
    let mut cfg: SimulateConfig = load_config(g.config.as_deref())?;
    if !a.tau.is_empty() {
        cfg.taus = a.tau.clone();
    }
    if let Some(v) = a.n_seeds {
        cfg.n_seeds = v;
    }
    let s = &mut cfg.sim;
    s.grid_n = a.grid_n.unwrap_or(s.grid_n);
    s.dt = a.dt.unwrap_or(s.dt);
    s.n_steps = a.n_steps.unwrap_or(s.n_steps);
    s.save_every = a.save_every.unwrap_or(s.save_every);
    s.spinup_time = a.spinup_time.unwrap_or(s.spinup_time);
    s.seed = g.seed.unwrap_or(s.seed);

    if cfg.taus.is_empty() || cfg.n_seeds == 0 {
        return Err(Error::Config("need at least one tau and one seed".into()).into());
    }
    let jobs: Vec<SimConfig> = cfg
        .taus
        .iter()
        .flat_map(|&tau| {
            let base = cfg.sim.clone();
            (0..cfg.n_seeds as u64).map(move |i| SimConfig { tau, seed: base.seed + i, ..base.clone() })
        })
        .collect();
    // Everything is checked before the first file is written.
    for j in &jobs {
        j.validate()?;
    }
    let out = a.out.clone().unwrap_or_else(|| g.root.join("sims"));
    jobs.par_iter().try_for_each(|job| -> Result<()> {
        let dest = out.join(tau_dir(job.tau)).join(format!("seed{}", job.seed));
        let Some(stage) = Staged::begin(&dest, g.force)? else {
            g.log(format!("{} is already complete; pass --force to redo it", dest.display()));
            return Ok(());
        };
        write_json(&stage.tmp.join("config.json"), job)?;
        let started = Instant::now();
        let traj = run_trajectory(job)?;
        write_trajectory(&stage.tmp, job, &traj)?;
        write_json(&stage.tmp.join("timing.json"), &serde_json::json!({ "seconds": started.elapsed().as_secs_f64() }))?;
        let dest = stage.commit()?;
        g.log(format!(
            "simulated tau = {} seed = {}: {} snapshots in {:.1} s -> {}",
            job.tau,
            job.seed,
            traj.snapshots.len(),
            started.elapsed().as_secs_f64(),
            dest.display()
        ));
        Ok(())
    })
}

pub fn build(g: &GlobalArgs, a: &BuildArgs) -> Result<()> {
    let mut split: SplitSpec = load_config(g.config.as_deref())?;
    split.n_train = a.n_train.unwrap_or(split.n_train);
    split.n_test = a.n_test.unwrap_or(split.n_test);
    split.gap = a.gap.unwrap_or(split.gap);
    let sims = match &a.sims {
        Some(p) => p.clone(),
        None => g.root.join("sims").join(tau_dir(need(a.tau, "--tau or --sims")?)),
    };
    let mut dirs: Vec<PathBuf> = fs::read_dir(&sims)
        .with_context(|| format!("listing trajectories in {}", sims.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && is_complete(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no complete trajectories under {}", sims.display())).into());
    }
    let mut sources = Vec::with_capacity(dirs.len());
    for d in &dirs {
        sources.push(read_trajectory(d).with_context(|| format!("loading {}", d.display()))?);
    }
    sources.sort_by_key(|(m, _)| m.seed);
    let tau = sources[0].0.config.tau;
    let out = a.out.clone().unwrap_or_else(|| g.root.join("datasets").join(tau_dir(tau)));
    let Some(stage) = Staged::begin(&out, g.force)? else {
        g.log(format!("{} is already complete; pass --force to redo it", out.display()));
        return Ok(());
    };
    write_json(&stage.tmp.join("config.json"), &split)?;
    let m = build_dataset(&sources, &split, &stage.tmp)?;
    let out = stage.commit()?;
    g.log(format!(
        "built dataset tau = {} from {} trajectories: {} train / {} test pairs -> {}",
        m.tau,
        sources.len(),
        m.n_train,
        m.n_test,
        out.display()
    ));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DataRef {
    dataset: PathBuf,
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn dataset_dir(g: &GlobalArgs, data: &Option<PathBuf>, tau: Option<f64>) -> Result<PathBuf> {
    match data {
        Some(d) => Ok(d.clone()),
        None => Ok(g.root.join("datasets").join(tau_dir(need(tau, "--tau or --data")?))),
    }
}

pub fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_config(g.config.as_deref())?;
    let s = &mut cfg.scheme;
    if let Some(v) = a.scheme {
        s.scheme = v;
    }
    if let Some(v) = a.lr {
        s.adam.lr = v;
    }
    s.network.hidden_channels = a.hidden.unwrap_or(s.network.hidden_channels);
    s.network.n_blocks = a.blocks.unwrap_or(s.network.n_blocks);
    s.network.dropout = a.dropout.unwrap_or(s.network.dropout);
    if let Some(e) = a.encoder {
        s.encoder_kind = e.into();
    }
    if a.lambda.is_some() {
        s.lambda = a.lambda;
    }
    if a.condition_on_y.is_some() {
        s.condition_on_y = a.condition_on_y;
    }
    s.n_steps = a.sampler_steps.unwrap_or(s.n_steps);
    cfg.n_train_steps = a.steps.unwrap_or(cfg.n_train_steps);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.checkpoint_every = a.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    cfg.validate_every = a.validate_every.unwrap_or(cfg.validate_every);
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    cfg.validate()?;

    let data_dir = dataset_dir(g, &a.data, a.tau)?;
    let tau = DatasetManifest::read(&data_dir)?.tau;
    let scheme = cfg.scheme.scheme;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| g.root.join("runs").join(tau_dir(tau)).join(scheme_dir(scheme)));
    let Some(stage) = Staged::begin(&out, g.force)? else {
        g.log(format!("{} is already complete; pass --force to redo it", out.display()));
        return Ok(());
    };
    let data = Dataset::load(&data_dir)?;
    write_json(&stage.tmp.join("data.json"), &DataRef { dataset: absolute(&data_dir) })?;
    let total = cfg.n_train_steps;
    let every = (total / 20).max(1);
    let started = Instant::now();
    let manifest = train_run(&data, &cfg, &stage.tmp, |r| {
        if (r.step + 1) % every == 0 {
            let sz = if r.sigma_z.is_finite() { format!(" sigma_z {:.4}", r.sigma_z) } else { String::new() };
            g.log(format!(
                "[{scheme} tau={tau}] step {}/{total} loss {:.4e}{sz} grad {:.3e} ({:.0} s)",
                r.step + 1,
                r.loss,
                r.grad_norm,
                started.elapsed().as_secs_f64()
            ));
        }
    })?;
    let out = stage.commit()?;
    g.log(format!("trained {scheme} for {} steps -> {}", manifest.steps_done, out.display()));
    Ok(())
}

/// Configuration of `sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Test cases to sample; all selected by the stride when absent.
    pub n_cases: Option<usize>,
    /// Cases `0, k, 2k, ...` of the test split are used.
    pub case_stride: usize,
    pub members: usize,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_cases: None, case_stride: 1, members: 8, chunk: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesManifest {
    pub format_version: u32,
    pub scheme: Scheme,
    pub tau: f64,
    pub run: PathBuf,
    pub dataset: PathBuf,
    /// Test-split index of each sampled case.
    pub cases: Vec<usize>,
    /// `[n_cases, members, C, H, W]`, physical units.
    pub shape: Vec<usize>,
    pub seed: u64,
    pub samples_sha256: String,
}

fn run_dir(g: &GlobalArgs, run: &Option<PathBuf>, tau: Option<f64>, scheme: Option<Scheme>) -> Result<PathBuf> {
    match run {
        Some(r) => Ok(r.clone()),
        None => Ok(g
            .root
            .join("runs")
            .join(tau_dir(need(tau, "--tau or --run")?))
            .join(scheme_dir(need(scheme, "--scheme or --run")?))),
    }
}

pub fn sample(g: &GlobalArgs, a: &SampleArgs) -> Result<()> {
    let mut cfg: SampleConfig = load_config(g.config.as_deref())?;
    if a.n_cases.is_some() {
        cfg.n_cases = a.n_cases;
    }
    cfg.case_stride = a.case_stride.unwrap_or(cfg.case_stride);
    cfg.members = a.members.unwrap_or(cfg.members);
    cfg.chunk = a.chunk.unwrap_or(cfg.chunk);
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    if cfg.members == 0 || cfg.chunk == 0 || cfg.case_stride == 0 || cfg.n_cases == Some(0) {
        return Err(Error::Config("members, chunk, case_stride and n_cases must be positive".into()).into());
    }
    let run = run_dir(g, &a.run, a.tau, a.scheme)?;
    if !is_complete(&run) {
        return Err(Error::Usage(format!("{} is not a completed training run", run.display())).into());
    }
    let data_dir = match &a.data {
        Some(d) => d.clone(),
        None => {
            let p = run.join("data.json");
            let r: DataRef = serde_json::from_slice(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?;
            r.dataset
        }
    };
    let out = a.out.clone().unwrap_or_else(|| run.join("samples"));
    let Some(stage) = Staged::begin(&out, g.force)? else {
        g.log(format!("{} is already complete; pass --force to redo it", out.display()));
        return Ok(());
    };
    let (_, run_manifest, model) = load_run(&run)?;
    let data = Dataset::load(&data_dir)?;
    if data.manifest.normalization != run_manifest.normalization {
        return Err(Error::Data(format!(
            "{} was not trained on {} (normalization differs)",
            run.display(),
            data_dir.display()
        ))
        .into());
    }
    let selectable = data.n_test().div_ceil(cfg.case_stride);
    let n_cases = cfg.n_cases.unwrap_or(selectable);
    if n_cases > selectable {
        return Err(Error::Config(format!(
            "{n_cases} cases requested but stride {} leaves {selectable}",
            cfg.case_stride
        ))
        .into());
    }
    cfg.n_cases = Some(n_cases);
    if run_manifest.scheme.is_deterministic() && cfg.members > 1 {
        g.log(format!("{} is deterministic; drawing 1 member instead of {}", run_manifest.scheme, cfg.members));
        cfg.members = 1;
    }
    let cases: Vec<usize> = (0..n_cases).map(|i| i * cfg.case_stride).collect();
    write_json(&stage.tmp.join("config.json"), &cfg)?;
    let scheme = run_manifest.scheme;
    let started = Instant::now();
    let every = (n_cases / 10).max(1);
    let samples = sample_cases(model.as_ref(), &data, &cases, cfg.members, cfg.seed, cfg.chunk, |done| {
        if done % every == 0 || done == n_cases {
            g.log(format!(
                "[{scheme}] sampled {done}/{n_cases} cases ({:.0} s)",
                started.elapsed().as_secs_f64()
            ));
        }
    })?;
    let path = stage.tmp.join("samples.npy");
    npy::write_file(&path, samples.shape(), samples.data())?;
    let manifest = SamplesManifest {
        format_version: SAMPLES_FORMAT_VERSION,
        scheme,
        tau: run_manifest.tau,
        run: absolute(&run),
        dataset: absolute(&data_dir),
        cases,
        shape: samples.shape().to_vec(),
        seed: cfg.seed,
        samples_sha256: sha256_file(&path)?,
    };
    write_json(&stage.tmp.join("manifest.json"), &manifest)?;
    let out = stage.commit()?;
    g.log(format!("wrote {:?} samples -> {}", manifest.shape, out.display()));
    Ok(())
}

/// Configuration of `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Members scored per case; all when absent.
    pub m: Option<usize>,
    pub estimator: CrpsEstimator,
    pub spectra: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { m: None, estimator: CrpsEstimator::Biased, spectra: true }
    }
}

pub fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> Result<()> {
    let mut cfg: EvaluateConfig = load_config(g.config.as_deref())?;
    if a.m.is_some() {
        cfg.m = a.m;
    }
    match a.estimator {
        Some(EstimatorArg::Biased) => cfg.estimator = CrpsEstimator::Biased,
        Some(EstimatorArg::Unbiased) => cfg.estimator = CrpsEstimator::Unbiased,
        None => {}
    }
    if a.no_spectra {
        cfg.spectra = false;
    }
    let samples_dir = match &a.samples {
        Some(s) => s.clone(),
        None => run_dir(g, &None, a.tau, a.scheme)?.join("samples"),
    };
    if !is_complete(&samples_dir) {
        return Err(Error::Usage(format!("{} holds no completed samples", samples_dir.display())).into());
    }
    let sm: SamplesManifest = serde_json::from_slice(&fs::read(samples_dir.join("manifest.json"))?)?;
    let data_dir = a.data.clone().unwrap_or_else(|| sm.dataset.clone());
    let out = match &a.out {
        Some(o) => o.clone(),
        None => samples_dir.parent().unwrap_or(Path::new(".")).join("eval"),
    };
    let Some(stage) = Staged::begin(&out, g.force)? else {
        g.log(format!("{} is already complete; pass --force to redo it", out.display()));
        return Ok(());
    };
    let npy_path = samples_dir.join("samples.npy");
    if sha256_file(&npy_path)? != sm.samples_sha256 {
        return Err(Error::Format { path: npy_path, detail: "content hash does not match manifest".into() }.into());
    }
    let samples = npy::read_file(&npy_path)?;
    // Load once for the hash and split checks; scores use the raw file.
    let data = Dataset::load(&data_dir)?;
    let truth = npy::read_file(&data_dir.join("x_test.npy"))?;
    let n_cases = samples.shape[0];
    if sm.cases.len() != n_cases || sm.cases.iter().any(|&c| c >= data.n_test()) {
        return Err(Error::Data(format!("sample case list does not fit the {} test pairs", data.n_test())).into());
    }
    let per: usize = truth.shape[1..].iter().product();
    let mut truth_shape = truth.shape.clone();
    truth_shape[0] = n_cases;
    let truth_sel: Vec<f32> = sm.cases.iter().flat_map(|&c| truth.data[c * per..(c + 1) * per].iter().copied()).collect();
    let m = cfg.m.unwrap_or(samples.shape[1]);
    cfg.m = Some(m);
    write_json(&stage.tmp.join("config.json"), &cfg)?;
    let opts = EvalOptions {
        scheme: sm.scheme.name().to_string(),
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        m,
        estimator: cfg.estimator,
        spectra: cfg.spectra,
    };
    let mut report = metrics::evaluate(&samples.data, &samples.shape, &truth_sel, &truth_shape, &opts)?;
    report.metadata.insert("tau".into(), sm.tau.to_string());
    report.metadata.insert("sample_seed".into(), sm.seed.to_string());
    report.metadata.insert("samples_sha256".into(), sm.samples_sha256.clone());
    metrics::write_report(&stage.tmp, &report)?;
    write_json(
        &stage.tmp.join("manifest.json"),
        &serde_json::json!({
            "scheme": sm.scheme,
            "tau": sm.tau,
            "n_cases": n_cases,
            "m": m,
            "files": ["report.csv", "report.json", "spectra.csv"],
        }),
    )?;
    let out = stage.commit()?;
    for c in &report.channels {
        g.log(format!(
            "[{} tau={}] {}: RMSE {:.4} MAE {:.4} CRPS {:.4} SSR {}",
            sm.scheme,
            sm.tau,
            c.variable,
            c.rmse,
            c.mae,
            c.crps,
            c.ssr.map_or("-".into(), |v| format!("{v:.3}"))
        ));
    }
    g.log(format!("report -> {}", out.display()));
    Ok(())
}

fn find_reports(root: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let Ok(taus) = fs::read_dir(root.join("runs")) else { return found };
    for t in taus.flatten() {
        let Ok(schemes) = fs::read_dir(t.path()) else { continue };
        for s in schemes.flatten() {
            let p = s.path().join("eval").join("report.json");
            if p.is_file() {
                found.push(p);
            }
        }
    }
    found.sort();
    found
}

pub fn table(g: &GlobalArgs, a: &TableArgs) -> Result<()> {
    let paths = if a.reports.is_empty() { find_reports(&g.root) } else { a.reports.clone() };
    if paths.is_empty() {
        return Err(Error::Usage("no evaluation reports found".into()).into());
    }
    let mut reports = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join("report.json") } else { p };
        let r: SkillReport = serde_json::from_slice(&fs::read(&file).with_context(|| format!("reading {}", file.display()))?)
            .map_err(|e| Error::Format { path: file.clone(), detail: e.to_string() })?;
        let tau: f64 = r
            .metadata
            .get("tau")
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format { path: file.clone(), detail: "report has no tau".into() })?;
        reports.push((tau, r));
    }
    let schemes: Vec<&str> = Scheme::ALL.iter().map(|s| s.name()).collect();
    let csv = metrics::skill_table_csv(&reports, &schemes);
    match &a.out {
        None => std::io::stdout().write_all(csv.as_bytes())?,
        Some(path) => {
            let tmp = path.with_extension("csv.partial");
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&tmp, &csv)?;
            fs::rename(&tmp, path)?;
            g.log(format!("table of {} reports -> {}", reports.len(), path.display()));
        }
    }
    Ok(())
}
