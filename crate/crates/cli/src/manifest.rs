//! Reproducibility manifests written beside every artifact-producing
//! command: the exact configuration, its hash, and a checksum of every
//! file the command wrote.  Nothing time-dependent goes in, so reruns of
//! the same command produce byte-identical manifests.

use std::path::Path;

use incrseg_core::archive;
use incrseg_core::{Error, Result};
use serde::Serialize;

#[derive(Serialize)]
pub struct OutputFile {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub outputs: Vec<OutputFile>,
}

impl Manifest {
    /// `config_text` is the canonical form that gets hashed; for training
    /// runs it matches the hash embedded in the checkpoints.
    pub fn new(command: &'static str, config: serde_json::Value, config_text: &str) -> Manifest {
        Manifest {
            tool: "incrseg",
            command,
            config,
            config_sha256: archive::hash_hex(&archive::config_hash(config_text)),
            outputs: Vec::new(),
        }
    }

    /// Record a file that lives under `root` (the manifest's directory).
    pub fn push_output(&mut self, root: &Path, file: &Path) -> Result<()> {
        let rel = file
            .strip_prefix(root)
            .map_err(|_| {
                Error::Config(format!(
                    "output {} does not live under {}",
                    file.display(),
                    root.display()
                ))
            })?
            .to_string_lossy()
            .into_owned();
        self.outputs.push(OutputFile {
            path: rel,
            sha256: archive::file_sha256(file)?,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
