//! Per-run `manifest.json`: what ran, with which settings, on which inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_secs: 0.0,
            started: Some(Instant::now()),
        })
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            hash: git_hash(&bytes),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> Result<PathBuf> {
        if let Some(t) = self.started {
            self.wall_time_secs = t.elapsed().as_secs_f64();
        }
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }
}

/// Content hash in git's object format: SHA-256 over `blob <len>\0<bytes>`.
pub fn git_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_hash_of_empty_blob() {
        // `git hash-object --object-format=sha256 /dev/null`
        assert_eq!(
            git_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn manifest_lists_inputs_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, b"hello").unwrap();
        let mut m = RunManifest::start("test", &serde_json::json!({"a": 1})).unwrap();
        m.seed("seed", 4);
        m.input(&input).unwrap();
        m.output(&dir.path().join("out.bin"));
        let path = m.finish(&dir.path().join(MANIFEST_NAME)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(v["command"], "test");
        assert_eq!(v["config"]["a"], 1);
        assert_eq!(v["seeds"]["seed"], 4);
        assert_eq!(v["inputs"][0]["hash"], git_hash(b"hello"));
        assert_eq!(v["outputs"].as_array().unwrap().len(), 1);
    }
}
