//! Run manifests: a JSON record of what a command was asked to do, what it
//! read, what it wrote, and how it ended. Written on success and on failure,
//! so every output directory explains itself.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// input path -> sha256 of its bytes
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub duration_secs: f64,
    /// "ok" or the error message that stopped the run
    pub status: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: BTreeMap::new(),
            seed: 0,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
            status: "ok".to_string(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> std::io::Result<()> {
        let digest = file_sha256(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(&mut self, started: Instant, status: Result<(), String>) {
        self.duration_secs = started.elapsed().as_secs_f64();
        self.status = match status {
            Ok(()) => "ok".to_string(),
            Err(msg) => msg,
        };
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n")
    }
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashes_match_known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        std::fs::write(&path, b"abc").unwrap();
        // sha256("abc"), a fixed vector.
        assert_eq!(
            file_sha256(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_roundtrips_and_reports_failure_status() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.json");
        std::fs::write(&input, b"{}").unwrap();

        let started = Instant::now();
        let mut m = RunManifest::new("train");
        m.seed = 7;
        m.config.insert("epochs".into(), "30".into());
        m.record_input(&input).unwrap();
        m.record_output(&dir.path().join("ckpt.json"));
        m.finish(started, Err("invalid value for tau: 0 must be positive".into()));

        let out = dir.path().join("sub/manifest.json");
        m.write(&out).unwrap();
        let back: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(back.status.contains("tau"));
        assert_eq!(back.inputs.len(), 1);
        assert!(back.duration_secs >= 0.0);
    }

    #[test]
    fn missing_input_is_an_io_error() {
        let mut m = RunManifest::new("eval");
        assert!(m.record_input(Path::new("/definitely/not/here.json")).is_err());
    }
}
