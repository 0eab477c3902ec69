use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sfm_core::Error;

/// A destination counts as complete once its `manifest.json` exists.
pub fn is_complete(dir: &Path) -> bool {
    dir.join("manifest.json").is_file()
}

/// Read a TOML (or `.json`) configuration file, or the defaults.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Staging directory for one output.
#[derive(Debug)]
pub struct Staged {
    pub tmp: PathBuf,
    pub dest: PathBuf,
}

impl Staged {
    /// Prepare `dest`. Returns `None` when it is already complete and
    /// `force` is off.
    pub fn begin(dest: &Path, force: bool) -> Result<Option<Self>> {
        if dest.exists() {
            if is_complete(dest) && !force {
                return Ok(None);
            }
            if !force {
                return Err(Error::Usage(format!(
                    "{} exists but is not a complete output; pass --force to replace it",
                    dest.display()
                ))
                .into());
            }
        }
        let name = dest
            .file_name()
            .ok_or_else(|| Error::Config(format!("{} has no final path component", dest.display())))?;
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = parent.join(format!(".{}.partial", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Some(Self { tmp, dest: dest.to_path_buf() }))
    }

    /// Move the finished output into place, replacing an old one.
    pub fn commit(self) -> Result<PathBuf> {
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).with_context(|| format!("removing {}", self.dest.display()))?;
        }
        fs::rename(&self.tmp, &self.dest).with_context(|| format!("moving output to {}", self.dest.display()))?;
        Ok(self.dest)
    }
}
