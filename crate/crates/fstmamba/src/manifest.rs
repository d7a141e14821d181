//! One JSON manifest per command run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::container::FORMAT_VERSION;
use crate::error::Result;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Everything needed to rerun: parsed config, flags and inputs.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<Artifact>,
    pub container_version: u32,
    pub manifest_version: u32,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            started_unix: now(),
            finished_unix: 0.0,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            container_version: FORMAT_VERSION,
            manifest_version: MANIFEST_VERSION,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn artifact(&mut self, role: &str, path: &Path, dims: Option<&[usize]>) {
        self.artifacts.push(Artifact { role: role.into(), path: path.to_path_buf(), dims: dims.map(<[usize]>::to_vec) });
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now();
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        crate::container::write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}
