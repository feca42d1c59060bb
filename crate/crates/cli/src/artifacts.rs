use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use orojar_core::data::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::failure::Failure;

pub const OUT_ENV: &str = "OROJAR_OUT";

/// `--out`, else `$OROJAR_OUT`, else the configured `out_dir`.
pub fn output_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(&cfg.out_dir),
    }
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Errors with `MissingInput` unless `path` is an existing file.
pub fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::MissingInput(format!("no {what} at {}", path.display())))
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a [String],
}

/// One command's output directory; every file goes through an atomic write
/// and is listed in `manifest.json`.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str) -> Result<Self, Failure> {
        let path = root.join(command);
        std::fs::create_dir_all(&path)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self {
            path,
            command: command.to_string(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let sum = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), sum);
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), Failure> {
        write_atomic(&self.path.join(rel), bytes)?;
        if !self.outputs.iter().any(|o| o == rel) {
            self.outputs.push(rel.to_string());
        }
        Ok(())
    }

    /// Writes the resolved config and the manifest.
    pub fn finish(mut self, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
        self.write("config.toml", cfg.to_toml().as_bytes())?;
        let manifest = Manifest {
            tool: "orojar",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            seed: cfg.seed,
            config: cfg,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
        write_atomic(&self.path.join("manifest.json"), json.as_bytes())?;
        Ok(self.path)
    }
}
