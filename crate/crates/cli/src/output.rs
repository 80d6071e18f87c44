//! Staged outputs: every file is written into a scratch directory next to
//! the destination and only moved into place once the command succeeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

use crate::config::hex;

pub const MANIFEST: &str = "manifest.json";

pub struct Staging {
    scratch: TempDir,
    out: PathBuf,
    written: Vec<String>,
}

impl Staging {
    /// Fails if any of `names` (or the manifest) already exists under `out`
    /// and `force` is off.
    pub fn prepare(out: &Path, names: &[&str], force: bool) -> anyhow::Result<Self> {
        if out.exists() && !out.is_dir() {
            bail!("{} exists and is not a directory", out.display());
        }
        if !force {
            let taken: Vec<&str> =
                names.iter().chain([&MANIFEST]).copied().filter(|n| out.join(n).exists()).collect();
            if !taken.is_empty() {
                bail!("{} already holds {} (use --force to overwrite)", out.display(), taken.join(", "));
            }
        }
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let scratch = tempfile::Builder::new()
            .prefix(".reidr-staging-")
            .tempdir_in(&parent)
            .with_context(|| format!("creating scratch directory in {}", parent.display()))?;
        Ok(Self { scratch, out: out.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        fs::write(self.scratch.path().join(name), bytes).with_context(|| format!("writing {name}"))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.scratch.path().join(name)
    }

    /// Registers a file produced directly at [`Staging::path`].
    pub fn mark_written(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    /// Writes the manifest last and moves everything into `out`.
    pub fn commit(mut self, manifest: Manifest) -> anyhow::Result<Vec<PathBuf>> {
        let manifest = Manifest { outputs: self.written.clone(), ..manifest };
        self.write_json(MANIFEST, &manifest)?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let mut moved = Vec::new();
        for name in &self.written {
            let dest = self.out.join(name);
            fs::rename(self.scratch.path().join(name), &dest).with_context(|| format!("promoting {}", dest.display()))?;
            moved.push(dest);
        }
        Ok(moved)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self { path: path.to_path_buf(), sha256: hex(&Sha256::digest(&bytes)) })
    }
}

/// Run record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, InputDigest>,
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> anyhow::Result<Self> {
        let versions = BTreeMap::from([
            ("reidr".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("reidr-core".to_string(), reidr_core::VERSION.to_string()),
        ]);
        Ok(Self {
            command: command.to_string(),
            config_hash: crate::config::config_hash(config)?,
            seed,
            versions,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        })
    }

    pub fn input(mut self, key: &str, path: &Path) -> anyhow::Result<Self> {
        self.inputs.insert(key.to_string(), InputDigest::of(path)?);
        Ok(self)
    }
}
