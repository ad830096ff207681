//! Run manifests: what a command read, what it wrote, and enough of the
//! invocation to run it again.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const TOOL: &str = "cropzoom";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    /// Primary outputs must be reproduced byte for byte on replay; secondary
    /// ones (timings, logs) are listed for completeness only.
    #[serde(default)]
    pub primary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Command-line arguments after the program name.
    pub args: Vec<String>,
    pub working_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub config: Config,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock seconds per named phase.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

impl RunManifest {
    pub fn new(args: Vec<String>, config: &Config, workers: usize) -> Self {
        Self {
            tool: TOOL.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args,
            working_dir: std::env::current_dir().unwrap_or_default(),
            seed: config.seed,
            workers,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
            primary: false,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path, primary: bool) -> std::io::Result<()> {
        self.outputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
            primary,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub fn read(path: &Path) -> std::io::Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Paths relative to the recorded working directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.working_dir.join(path)
        }
    }

    /// Inputs whose current content differs from the recorded digest.
    pub fn changed_inputs(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .filter(|d| sha256_file(&self.resolve(&d.path)).ok().as_deref() != Some(d.sha256.as_str()))
            .map(|d| d.path.clone())
            .collect()
    }

    /// Primary outputs of `self` whose digest is missing from or different
    /// in `other`.
    pub fn primary_mismatches(&self, other: &RunManifest) -> Vec<PathBuf> {
        self.outputs
            .iter()
            .filter(|d| d.primary)
            .filter(|d| {
                !other
                    .outputs
                    .iter()
                    .any(|o| o.path == d.path && o.sha256 == d.sha256)
            })
            .map(|d| d.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out.txt");
        std::fs::write(&out, "1").unwrap();
        let mut m = RunManifest::new(vec!["eval".into()], &Config::default(), 2);
        m.add_output(&out, true).unwrap();
        m.timings.insert("eval".into(), 0.5);
        let mp = dir.path().join("m.json");
        m.write(&mp).unwrap();
        let back = RunManifest::read(&mp).unwrap();
        assert_eq!(back, m);
        assert!(m.primary_mismatches(&back).is_empty());

        std::fs::write(&out, "2").unwrap();
        let mut again = m.clone();
        again.outputs.clear();
        again.add_output(&out, true).unwrap();
        assert_eq!(m.primary_mismatches(&again), vec![out]);
    }
}
