//! Run manifests and output-directory bookkeeping.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use embedforge::error::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a run: the resolved configuration, its
/// seed, digests of every input and output, and timings.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub status: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    /// Digest of the loaded item matrix and labels, so generated data is
    /// covered too.
    pub dataset_sha256: Option<String>,
    pub outputs: Vec<FileDigest>,
    pub wall_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

/// Writes `contents` to `path` through a sibling temporary file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let io = |e| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Output directory of one run. Every file a command writes goes through
/// [`OutDir::path`], which keeps the run confined to the directory and
/// records the file for the manifest.
pub struct OutDir {
    root: PathBuf,
    written: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    started: Instant,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::Io {
            path: root.display().to_string(),
            source: e,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
            inputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        if !self.written.contains(&p) {
            self.written.push(p.clone());
        }
        p
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, contents)?;
        Ok(p)
    }

    pub fn add_input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    /// Writes `manifest.json` listing every input and every output that exists.
    pub fn finish(
        mut self,
        command: &str,
        status: &str,
        seed: u64,
        config: serde_json::Value,
        dataset_sha256: Option<String>,
    ) -> Result<()> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| file_digest(p))
            .collect::<Result<Vec<_>>>()?;
        let outputs = self
            .written
            .iter()
            .filter(|p| p.exists())
            .map(|p| file_digest(p))
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            argv: std::env::args().collect(),
            status: status.to_string(),
            seed,
            config,
            inputs,
            dataset_sha256,
            outputs,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        let path = self.path("manifest.json");
        write_atomic(&path, text.as_bytes())
    }
}
