//! Artifact writing and the per-run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{save_jsonl, Dataset};
use crate::error::{Error, Result};
use crate::models::{save_checkpoint, TwoBranchModel};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run: the effective configuration, the
/// seeds, and content hashes of what went in and what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes files under one root directory, refusing to overwrite any input.
#[derive(Debug)]
pub struct Outputs {
    root: PathBuf,
    inputs: Vec<PathBuf>,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(root: &Path, inputs: &[PathBuf]) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Outputs {
            root: root.to_path_buf(),
            inputs: inputs.to_vec(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn claim(&mut self, rel: &Path) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if let Ok(target) = path.canonicalize() {
            for input in &self.inputs {
                if input.canonicalize().is_ok_and(|i| i == target) {
                    return Err(Error::Config(format!(
                        "refusing to overwrite input file {}",
                        input.display()
                    )));
                }
            }
        }
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_path_buf());
        }
        Ok(path)
    }

    pub fn write_bytes(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.claim(rel.as_ref())?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let mut body = serde_json::to_vec_pretty(value)?;
        body.push(b'\n');
        self.write_bytes(rel, &body)
    }

    pub fn write_with(
        &mut self,
        rel: impl AsRef<Path>,
        fill: impl FnOnce(&mut Vec<u8>) -> Result<()>,
    ) -> Result<PathBuf> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write_bytes(rel, &buf)
    }

    pub fn write_jsonl(&mut self, rel: impl AsRef<Path>, ds: &Dataset) -> Result<PathBuf> {
        let path = self.claim(rel.as_ref())?;
        save_jsonl(ds, &path)?;
        Ok(path)
    }

    pub fn write_checkpoint(&mut self, rel: impl AsRef<Path>, model: &TwoBranchModel) -> Result<PathBuf> {
        let path = self.claim(rel.as_ref())?;
        save_checkpoint(model, &path)?;
        Ok(path)
    }

    /// Records a file some other routine wrote under the root.
    pub fn adopt(&mut self, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(&self.root)
            .map_err(|_| Error::Config(format!("{} is outside the output directory", path.display())))?;
        self.claim(&rel.to_path_buf()).map(|_| ())
    }

    /// Hashes inputs and outputs and writes `manifest.json` next to them.
    pub fn finish(
        self,
        command: &str,
        config: serde_json::Value,
        seeds: BTreeMap<String, u64>,
    ) -> Result<Manifest> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rels = self.written.clone();
        rels.sort();
        let artifacts = rels
            .iter()
            .map(|rel| {
                Ok(Artifact {
                    path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                    sha256: sha256_file(&self.root.join(rel))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            inputs,
            artifacts,
        };
        let path = self.root.join(MANIFEST);
        let mut body = serde_json::to_vec_pretty(&manifest)?;
        body.push(b'\n');
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}
