use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fimmerge_core::io::{file_digest, write_json};
use serde::Serialize;

/// Record of one run: effective parameters plus digests of every file read
/// and written. Contains nothing time- or host-dependent, so reruns produce
/// identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub params: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &'static str, seed: u64, params: impl Serialize) -> anyhow::Result<Self> {
        Ok(Self {
            tool: "fimmerge",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            params: serde_json::to_value(params)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
        })
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        self.outputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn write(&self, report_dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(report_dir).map_err(|source| fimmerge_core::Error::Io {
            path: report_dir.to_path_buf(),
            source,
        })?;
        let path = report_dir.join(format!("{}.manifest.json", self.command));
        write_json(&path, self)?;
        Ok(path)
    }
}
