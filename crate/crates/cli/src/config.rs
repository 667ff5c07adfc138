use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use robust_combat::eval::StudyConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, ExitClass};

/// Everything a run reads from the config file. Unspecified keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub paths: Paths,
    pub study: StudyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: String,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            log_level: "info".into(),
            threads: 0,
        }
    }
}

/// File locations. Empty strings mean "not set".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out: PathBuf,
    /// Reference cohort CSV; empty uses the simulated reference.
    pub reference: PathBuf,
    /// Trained detector; empty means `<out>/model.json` where a model is written.
    pub model: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("rcombat-out"),
            reference: PathBuf::new(),
            model: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| CliError::wrap(ExitClass::Config, e))?;
        toml::from_str(&text).map_err(|e| CliError::new(ExitClass::Config, format!("config {}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn reference(&self) -> Option<&Path> {
        non_empty(&self.paths.reference)
    }

    pub fn model(&self) -> Option<&Path> {
        non_empty(&self.paths.model)
    }
}

fn non_empty(p: &Path) -> Option<&Path> {
    (!p.as_os_str().is_empty()).then_some(p)
}

/// Marks an output directory as owned by one process. Removed on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(".rcombat.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                ExitClass::Config,
                format!(
                    "output directory {} is in use by another run (remove {} if that run is gone)",
                    out.display(),
                    path.display()
                ),
            )
            .into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_defaults_parse_back() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_keep_defaults() {
        let c: RunConfig = toml::from_str("[study]\nseed = 7\n[study.grid]\nsites_per_ratio = 2\n").unwrap();
        assert_eq!(c.study.seed, 7);
        assert_eq!(c.study.grid.sites_per_ratio, 2);
        assert_eq!(c.study.grid.ratios, StudyConfig::default().grid.ratios);
        assert_eq!(c.paths, Paths::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[run]\nthreds = 2\n").is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }
}
