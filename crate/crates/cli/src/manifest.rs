//! `manifest.json`: the config hash, every artifact with its digest, and
//! per-stage wall-clock timings.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub artifacts: Vec<Artifact>,
    pub timings: Vec<StageTiming>,
}

impl RunManifest {
    /// Opens the manifest in `out`, or starts one. A manifest written under
    /// another config is refused so artifacts of two configs never mix.
    pub fn open(out: &Path, config_hash: &str) -> CliResult<Self> {
        let path = out.join(MANIFEST_FILE);
        if path.exists() {
            let m = Self::read(out)?;
            if m.config_hash != config_hash {
                return Err(CliError::Config(format!(
                    "{} belongs to config {}, not {config_hash}; choose another --out",
                    out.display(),
                    &m.config_hash[..12.min(m.config_hash.len())]
                )));
            }
            return Ok(m);
        }
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            artifacts: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn read(out: &Path) -> CliResult<Self> {
        let path = out.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_at(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Records (or refreshes) a file under `out`.
    pub fn record(&mut self, out: &Path, file: &Path) -> CliResult<()> {
        let bytes = std::fs::read(file).map_err(io_at(file))?;
        let rel = file.strip_prefix(out).unwrap_or(file).to_path_buf();
        let entry = Artifact {
            path: rel.clone(),
            sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            bytes: bytes.len() as u64,
        };
        match self.artifacts.iter_mut().find(|a| a.path == rel) {
            Some(a) => *a = entry,
            None => self.artifacts.push(entry),
        }
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    /// Writes `bytes` to `out/rel`, creating parent directories, and records it.
    pub fn emit(&mut self, out: &Path, rel: impl AsRef<Path>, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_at(parent))?;
        }
        std::fs::write(&path, bytes).map_err(io_at(&path))?;
        self.record(out, &path)?;
        Ok(path)
    }

    pub fn time(&mut self, stage: &str, started: Instant) {
        self.timings.push(StageTiming { stage: stage.into(), seconds: started.elapsed().as_secs_f64() });
    }

    pub fn write(&self, out: &Path) -> CliResult<PathBuf> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(io_at(&path))?;
        Ok(path)
    }
}
