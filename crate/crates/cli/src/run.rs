//! Output directories: one per run, sealed by a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    /// Absent for files holding wall-clock measurements.
    pub sha256: Option<String>,
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub version: String,
    pub artifacts: Vec<Artifact>,
}

pub struct Run {
    pub dir: PathBuf,
    pub command: String,
    pub config: ExperimentConfig,
    pub hash: String,
    artifacts: Vec<Artifact>,
}

impl Run {
    /// Opens `dir` for a new run; a directory that already holds a manifest
    /// is a finished run and is never written again.
    pub fn start(dir: &Path, command: &str, config: ExperimentConfig) -> Result<Self> {
        if dir.join(MANIFEST).exists() {
            bail!("{} already holds a completed run; choose a new --out", dir.display());
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let hash = config.hash(command);
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config,
            hash,
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Records a file already written under the run directory.
    pub fn record(&mut self, file: &str, timing: bool) -> Result<()> {
        let sha256 = if timing {
            None
        } else {
            let bytes = fs::read(self.path(file)).with_context(|| format!("reading back {file}"))?;
            Some(hex::encode(Sha256::digest(&bytes)))
        };
        self.artifacts.push(Artifact {
            file: file.to_string(),
            sha256,
            timing,
        });
        Ok(())
    }

    pub fn write(&mut self, file: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(file), contents).with_context(|| format!("writing {file}"))?;
        self.record(file, false)
    }

    pub fn write_timing(&mut self, file: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(file), contents).with_context(|| format!("writing {file}"))?;
        self.record(file, true)
    }

    /// Pretty JSON with the config hash merged into the top-level object.
    pub fn write_json(&mut self, file: &str, value: serde_json::Value, timing: bool) -> Result<()> {
        let mut value = value;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("config_hash".into(), self.hash.clone().into());
        }
        let text = serde_json::to_string_pretty(&value)? + "\n";
        if timing {
            self.write_timing(file, text)
        } else {
            self.write(file, text)
        }
    }

    /// Checkpoint metadata naming the producing run.
    pub fn metadata(&self, extra: serde_json::Value) -> serde_json::Value {
        let mut meta = serde_json::json!({ "command": self.command, "config_hash": self.hash });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        meta
    }

    pub fn finish(self) -> Result<PathBuf> {
        let manifest = Manifest {
            command: self.command,
            config_hash: self.hash,
            config: self.config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: self.artifacts,
        };
        let path = self.dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(self.dir)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("{} is not a completed run", dir.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
