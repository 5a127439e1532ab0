//! Run manifests written next to every artifact.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result, Settings};

pub const MANIFEST: &str = "run.json";

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub git_describe: String,
    pub config: Settings,
    /// Output file name to sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub info: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, settings: &Settings) -> RunManifest {
        RunManifest {
            command: command.into(),
            seed: settings.seed,
            config_hash: settings.config_hash(),
            git_describe: git_describe(),
            config: settings.clone(),
            outputs: BTreeMap::new(),
            info: serde_json::Value::Null,
        }
    }

    /// Records a file already written under `dir`.
    pub fn output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(name.into(), format!("{:x}", Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// `git describe` of the working directory, or the crate version outside a
/// repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}
