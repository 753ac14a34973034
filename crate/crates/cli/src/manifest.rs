//! `manifest.json`: what ran, with which settings, on which bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Input path to SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to SHA-256 hex digest.
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub result: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_seconds: 0.0,
            result: serde_json::Value::Null,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Records digests of `names` inside `dir` and writes the manifest next to them.
    pub fn write(mut self, dir: &Path, names: &[&str]) -> CliResult<()> {
        for name in names {
            self.outputs.insert((*name).into(), sha256_file(&dir.join(name))?);
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("out.txt"), "x").unwrap();
        let mut m = RunManifest::new("fit", serde_json::json!({"tol": 0.01}), Some(3));
        m.add_input(&dir.path().join("out.txt")).unwrap();
        m.write(dir.path(), &["out.txt"]).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back.outputs["out.txt"], sha256_file(&dir.path().join("out.txt")).unwrap());
        assert_eq!(back.seed, Some(3));
        assert_eq!(back.command, "fit");
    }
}
