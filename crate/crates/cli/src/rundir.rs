//! Run directories: every artifact a command writes, plus `config.toml`
//! (the resolved configuration) and `manifest.json` (hashes of everything
//! read and written, seeds and headline metrics).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, String>,
}

pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunDir {
    pub fn create(root: &Path, command: &str, cfg: &Config, seed: Option<u64>) -> Result<RunDir> {
        fs::create_dir_all(root)
            .with_context(|| format!("creating run directory {}", root.display()))?;
        let mut run = RunDir {
            root: root.to_path_buf(),
            manifest: Manifest {
                tool: format!("cyphertalk {}", env!("CARGO_PKG_VERSION")),
                command: command.to_string(),
                argv: std::env::args().collect(),
                seed,
                config_sha256: cfg.sha256(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                metrics: BTreeMap::new(),
                notes: BTreeMap::new(),
            },
        };
        run.write("config", CONFIG, cfg.to_toml().as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(Artifact {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    /// Write `bytes` to `name` inside the run directory and record its hash.
    pub fn write(&mut self, role: &str, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.push(Artifact {
            role: role.to_string(),
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(path)
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.manifest.metrics.insert(name.into(), value);
    }

    pub fn note(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.manifest.notes.insert(name.into(), value.into());
    }

    pub fn finish(self) -> Result<PathBuf> {
        let path = self.path(MANIFEST);
        let json = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.root)
    }
}
