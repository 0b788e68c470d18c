//! Run manifests: what produced a directory of artifacts. They are the only
//! outputs that carry wall-clock data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub crc32: u32,
    pub bytes: u64,
}

impl Artifact {
    /// Describes a file that has just been written.
    pub fn of(dir: &Path, name: &str) -> Result<Artifact> {
        let path = dir.join(name);
        let data = fs::read(&path).map_err(Error::io(&path))?;
        Ok(Artifact {
            path: name.into(),
            crc32: crc32fast::hash(&data),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub created_unix: u64,
    pub config: Config,
    pub seeds: Vec<u64>,
    pub dataset_checksum: Option<u32>,
    pub artifacts: Vec<Artifact>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, seeds: Vec<u64>) -> Self {
        RunManifest {
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            config: config.clone(),
            seeds,
            dataset_checksum: None,
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}
