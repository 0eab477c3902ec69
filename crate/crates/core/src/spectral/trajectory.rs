use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use super::stepper::{initial_condition, Simulator};
use super::workspace::SpectralWorkspace;
use crate::{npy, Error, Result};

pub const SIM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub zeta_l: Vec<f64>,
    pub zeta_h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid_n: usize,
    pub snapshots: Vec<Snapshot>,
}

/// Integrate spin-up without recording, then record every `save_every`.
///
/// Snapshot times are measured from the end of spin-up.
pub fn run_trajectory(cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let ws = SpectralWorkspace::new(cfg.grid_n)?;
    let sim = Simulator::new(cfg, &ws);
    let mut state = initial_condition(&ws, cfg.seed);
    for _ in 0..cfg.spinup_steps() {
        sim.step_state(&mut state, &ws)?;
    }
    let t0 = state.time;
    let every = cfg.steps_per_save();
    let n_snap = cfg.n_snapshots();
    let mut snapshots = Vec::with_capacity(n_snap);
    for k in 1..=(n_snap as u64 * every) {
        sim.step_state(&mut state, &ws)?;
        if k % every == 0 {
            let (zeta_l, zeta_h) = state.fields(&ws);
            snapshots.push(Snapshot {
                time: k as f64 * cfg.dt,
                zeta_l,
                zeta_h,
            });
        }
    }
    debug_assert!(state.time >= t0);
    Ok(Trajectory { grid_n: cfg.grid_n, snapshots })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub nu_h: f64,
    pub nu_l: f64,
    pub steps_per_save: u64,
    pub spinup_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub format_version: u32,
    pub config: SimConfig,
    pub seed: u64,
    pub derived: DerivedParams,
    pub snapshot_times: Vec<f64>,
    /// Field name to file name, relative to the manifest.
    pub files: BTreeMap<String, String>,
    /// Field name to hex SHA-256 of the file.
    pub sha256: BTreeMap<String, String>,
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write `zeta_l.npy`, `zeta_h.npy` (`[n_snapshots, n, n]`, float32) and
/// `manifest.json` into `dir`.
pub fn write_trajectory(dir: &Path, cfg: &SimConfig, traj: &Trajectory) -> Result<SimManifest> {
    fs::create_dir_all(dir)?;
    let n = traj.grid_n;
    let shape = [traj.snapshots.len(), n, n];
    let mut files = BTreeMap::new();
    let mut sha = BTreeMap::new();
    for (name, pick) in [
        ("zeta_l", (|s: &Snapshot| &s.zeta_l) as fn(&Snapshot) -> &Vec<f64>),
        ("zeta_h", |s: &Snapshot| &s.zeta_h),
    ] {
        let data: Vec<f32> = traj
            .snapshots
            .iter()
            .flat_map(|s| pick(s).iter().map(|&v| v as f32))
            .collect();
        let file = format!("{name}.npy");
        let path = dir.join(&file);
        npy::write_file(&path, &shape, &data)?;
        sha.insert(name.to_string(), sha256_file(&path)?);
        files.insert(name.to_string(), file);
    }
    let (nu_h, nu_l) = cfg.resolved_nu();
    let manifest = SimManifest {
        format_version: SIM_FORMAT_VERSION,
        config: cfg.clone(),
        seed: cfg.seed,
        derived: DerivedParams {
            nu_h,
            nu_l,
            steps_per_save: cfg.steps_per_save(),
            spinup_steps: cfg.spinup_steps(),
        },
        snapshot_times: traj.snapshots.iter().map(|s| s.time).collect(),
        files,
        sha256: sha,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load a trajectory directory, verifying file hashes and shapes.
pub fn read_trajectory(dir: &Path) -> Result<(SimManifest, Trajectory)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: SimManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format_version != SIM_FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let n = manifest.config.grid_n;
    let n_snap = manifest.snapshot_times.len();
    let mut fields = BTreeMap::new();
    for name in ["zeta_l", "zeta_h"] {
        let file = manifest
            .files
            .get(name)
            .ok_or_else(|| Error::format(&manifest_path, format!("missing file entry {name}")))?;
        let path = dir.join(file);
        let want = manifest.sha256.get(name).cloned().unwrap_or_default();
        if sha256_file(&path)? != want {
            return Err(Error::format(&path, "content hash does not match manifest"));
        }
        let arr = npy::read_file(&path)?;
        if arr.shape != [n_snap, n, n] {
            return Err(Error::format(&path, format!("unexpected shape {:?}", arr.shape)));
        }
        fields.insert(name, arr.data);
    }
    let n2 = n * n;
    let snapshots = (0..n_snap)
        .map(|k| Snapshot {
            time: manifest.snapshot_times[k],
            zeta_l: fields["zeta_l"][k * n2..(k + 1) * n2].iter().map(|&v| f64::from(v)).collect(),
            zeta_h: fields["zeta_h"][k * n2..(k + 1) * n2].iter().map(|&v| f64::from(v)).collect(),
        })
        .collect();
    Ok((manifest, Trajectory { grid_n: n, snapshots }))
}
