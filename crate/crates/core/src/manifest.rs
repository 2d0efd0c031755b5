//! Run manifest: content hashes of every stage's inputs and outputs, used to
//! skip stages whose inputs have not changed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

/// Hash of a serializable value through its canonical JSON form.
pub fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_bytes(serde_json::to_string(value)?.as_bytes()))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's effective settings.
    pub settings: String,
    /// Input path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> content hash.
    pub outputs: BTreeMap<String, String>,
    /// Unix seconds.
    pub started: u64,
    pub finished: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Hash of the whole config file, if one was given.
    pub config_hash: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config_hash: None,
            stages: BTreeMap::new(),
        }
    }
}

fn hash_paths(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

impl RunManifest {
    /// Loads `dir/manifest.json`, or a fresh manifest if absent.
    pub fn load_or_default(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        if path.exists() {
            Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::create_dir_all(dir.as_ref())?;
        fs::write(
            dir.as_ref().join(MANIFEST_FILE),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }

    /// True if `stage` already ran with these settings and inputs and all its
    /// outputs still carry the recorded hashes.
    pub fn is_current(&self, stage: &str, settings: &str, inputs: &[PathBuf]) -> Result<bool> {
        let Some(rec) = self.stages.get(stage) else {
            return Ok(false);
        };
        if rec.settings != settings || inputs.iter().any(|p| !p.exists()) || rec.inputs != hash_paths(inputs)? {
            return Ok(false);
        }
        for (path, hash) in &rec.outputs {
            let p = Path::new(path);
            if !p.exists() || &sha256_file(p)? != hash {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Runs `body` unless the stage is current, then records its outputs.
    /// Returns whether the stage actually ran.
    pub fn run_stage<F>(&mut self, stage: &str, settings: &str, inputs: &[PathBuf], body: F) -> Result<bool>
    where
        F: FnOnce() -> Result<Vec<PathBuf>>,
    {
        if self.is_current(stage, settings, inputs)? {
            return Ok(false);
        }
        let started = now();
        let input_hashes = hash_paths(inputs)?;
        let outputs = body()?;
        self.stages.insert(
            stage.to_owned(),
            StageRecord {
                settings: settings.to_owned(),
                inputs: input_hashes,
                outputs: hash_paths(&outputs)?,
                started,
                finished: now(),
            },
        );
        Ok(true)
    }
}
