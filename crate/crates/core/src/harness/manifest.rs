use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileHash { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(sha256_hex(&bytes))
}

/// Everything needed to re-run a stage and check that it reproduces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// Resolved configuration of the stage.
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    /// Working directory that relative paths in `argv` resolve against.
    pub cwd: PathBuf,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub version: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: &str, argv: Vec<String>, config: serde_json::Value, seed: u64, inputs: &[&Path]) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            argv,
            config,
            seed,
            threads: rayon::current_num_threads(),
            cwd: std::env::current_dir()?,
            inputs: inputs.iter().map(|p| FileHash::of(p)).collect::<Result<_>>()?,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn finish(&mut self, outputs: &[&Path]) -> Result<()> {
        self.outputs = outputs.iter().map(|p| FileHash::of(p)).collect::<Result<_>>()?;
        self.finished_unix = now();
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Inputs whose current content differs from the recorded hash.
    pub fn changed_inputs(&self) -> Result<Vec<PathBuf>> {
        changed(&self.inputs)
    }

    /// Outputs whose current content differs from the recorded hash.
    pub fn changed_outputs(&self) -> Result<Vec<PathBuf>> {
        changed(&self.outputs)
    }
}

fn changed(files: &[FileHash]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for f in files {
        if !f.path.exists() || sha256_file(&f.path)? != f.sha256 {
            out.push(f.path.clone());
        }
    }
    Ok(out)
}
