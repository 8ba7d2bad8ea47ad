//! Reproducibility manifests written next to every artifact.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git-style object hash: sha256 over `blob <len>\0` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Serialize)]
pub struct Entry {
    pub path: String,
    pub blob: String,
}

impl Entry {
    pub fn of(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.display().to_string(),
            blob: blob_hash(bytes),
        }
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        Ok(Self::of(path, &std::fs::read(path)?))
    }
}

#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub inputs: Vec<Entry>,
    pub outputs: Vec<Entry>,
}

impl Manifest {
    pub fn new(config: Option<serde_json::Value>) -> Self {
        let config_hash = config
            .as_ref()
            .map(|c| blob_hash(serde_json::to_string(c).expect("json value").as_bytes()));
        Self {
            tool: "tamlab",
            version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().skip(1).collect(),
            config_hash,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Writes `<artifact>.manifest.json` and returns its path.
    pub fn write_beside(&self, artifact: &Path) -> std::io::Result<PathBuf> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_objects() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
