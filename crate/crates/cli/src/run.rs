//! Run bookkeeping: artifact tracking, input hashes and the run manifest.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use ruinscope::experiments::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one artifact-producing invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Files created by the current command, removed again if it fails.
pub struct Run {
    command: &'static str,
    out: PathBuf,
    start: Instant,
    created: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    committed: bool,
}

impl Run {
    pub fn new(command: &'static str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { command, out: out.to_path_buf(), start: Instant::now(), created: Vec::new(), inputs: Vec::new(), committed: false })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn inputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.inputs.extend(paths);
    }

    /// Writes `bytes` atomically and tracks the file.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        self.created.push(path.to_path_buf());
        write_atomic(path, bytes)?;
        Ok(())
    }

    /// Tracks a file written by other code.
    pub fn created(&mut self, path: &Path) {
        self.created.push(path.to_path_buf());
    }

    /// Hashes inputs and writes the run manifest; after this the outputs are kept.
    pub fn finish(mut self, config: serde_json::Value, seed: u64) -> Result<()> {
        let mut inputs = Vec::with_capacity(self.inputs.len());
        let mut paths = self.inputs.clone();
        paths.sort();
        paths.dedup();
        for p in paths {
            inputs.push(InputHash { sha256: sha256_file(&p)?, path: p.display().to_string() });
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().collect(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs: self.created.iter().map(|p| p.display().to_string()).collect(),
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        let path = self.out.join(RUN_MANIFEST);
        self.write(&path, &serde_json::to_vec_pretty(&manifest)?)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.created {
                let _ = fs::remove_file(p);
            }
        }
    }
}
