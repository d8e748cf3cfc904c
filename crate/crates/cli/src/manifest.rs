use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let data = std::fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    let hash = Sha256::digest(&data);
    Ok(FileDigest {
        path: path.display().to_string(),
        bytes: data.len() as u64,
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Provenance of one command run, written next to its outputs. Outputs point
/// back at it by file name: `<output>.manifest.json`, or `manifest.json` in
/// an output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    /// Parsed options after config-file merging, defaults included.
    pub config: serde_json::Value,
    pub config_file: Option<FileDigest>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub warnings: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

pub struct ManifestBuilder {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    config_file: Option<PathBuf>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
    started: DateTime<Utc>,
}

impl ManifestBuilder {
    pub fn new(command: &str, argv: &[String], config: serde_json::Value, config_file: Option<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config,
            config_file,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            started: Utc::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let m = message.into();
        log::warn!("{m}");
        self.warnings.push(m);
    }

    /// Records a warning the library has already logged.
    pub fn note(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let hash_all = |paths: &[PathBuf]| paths.iter().map(|p| digest(p)).collect::<Result<Vec<_>>>();
        let manifest = RunManifest {
            tool: "iconokit",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.clone(),
            argv: self.argv.clone(),
            config: self.config.clone(),
            config_file: self.config_file.as_deref().map(digest).transpose()?,
            seed: self.seed,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            warnings: self.warnings.clone(),
            started_at: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }
}

/// Sidecar manifest path of a single output file.
pub fn sidecar(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}
