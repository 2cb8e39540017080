//! Per-command provenance manifests: the effective config, fingerprints of
//! every input consumed, and content hashes of every artifact written.
//! Deliberately timestamp-free, with sorted keys throughout, so re-running a
//! deterministic command reproduces its manifest byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crowdveil_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    /// SHA-256 of the canonical JSON encoding of `config`.
    pub config_sha256: String,
    /// The effective run configuration after flag overrides.
    pub config: serde_json::Value,
    /// Input name → content fingerprint.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the output root) → SHA-256 of the file.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Manifest> {
        let config = serde_json::to_value(config)
            .map_err(|e| Error::Config(format!("encoding effective config: {e}")))?;
        // serde_json maps are key-sorted, so this encoding is canonical.
        let canonical = serde_json::to_string(&config)
            .map_err(|e| Error::Config(format!("encoding effective config: {e}")))?;
        Ok(Manifest {
            command: command.to_string(),
            config_sha256: sha256_bytes(canonical.as_bytes()),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, name: &str, fingerprint: impl Into<String>) {
        self.inputs.insert(name.to_string(), fingerprint.into());
    }

    /// Record an output file by hashing its current on-disk contents.
    pub fn output_file(&mut self, rel: &str, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.outputs.insert(rel.to_string(), hash);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("encoding manifest: {e}")))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_are_reproducible_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("artifact.bin");
        fs::write(&artifact, b"payload").unwrap();

        let build = || {
            let mut m = Manifest::new("demo", &serde_json::json!({"b": 2, "a": 1})).unwrap();
            m.input("zeta", "fp-1");
            m.input("alpha", "fp-2");
            m.output_file("artifact.bin", &artifact).unwrap();
            let path = dir.path().join("manifest.json");
            m.write(&path).unwrap();
            fs::read(&path).unwrap()
        };
        let first = build();
        let second = build();
        assert_eq!(first, second, "manifest must be byte-stable across runs");

        let text = String::from_utf8(first).unwrap();
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
        assert!(text.contains(&sha256_bytes(b"payload")));
    }
}
