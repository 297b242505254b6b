//! Run manifests: what was run, with which configuration and on which
//! exact inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub toolkit_version: String,
    /// Command-line arguments after the program name.
    pub args: Vec<String>,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(subcommand: &str, args: &[String], config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            args: args.to_vec(),
            config,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn add_input(&mut self, key: &str, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.insert(key.to_string(), FileDigest { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn add_output(&mut self, key: &str, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.outputs.insert(key.to_string(), FileDigest { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn write(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_at = now();
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        std::fs::write(path, json).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("invalid manifest {}: {e}", path.display())))
    }

    /// Fails with a data-mismatch error if any recorded input changed.
    pub fn verify_inputs(&self) -> Result<(), CliError> {
        for (key, d) in &self.inputs {
            let now = sha256_file(&d.path)?;
            if now != d.sha256 {
                return Err(CliError::data(format!("input {key} ({}) changed since the recorded run", d.path.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_verified() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.txt");
        std::fs::write(&f, "abc").unwrap();
        assert_eq!(sha256_file(&f).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let mut m = RunManifest::new("eval", &["--x".into()], serde_json::json!({}), None);
        m.add_input("data", &f).unwrap();
        let out = dir.path().join("m.json");
        m.write(&out).unwrap();
        let back = RunManifest::read(&out).unwrap();
        assert!(back.verify_inputs().is_ok());
        std::fs::write(&f, "abd").unwrap();
        assert_eq!(back.verify_inputs().unwrap_err().code, crate::EXIT_DATA);
    }
}
