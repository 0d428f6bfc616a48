use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Record of one command invocation, written as `manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// path -> sha256 of every input file
    pub inputs: BTreeMap<String, String>,
    /// path relative to the output directory -> sha256
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    started: SystemTime,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &impl Serialize, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Hashes inputs and every file under `out` (except a previous
    /// manifest) and writes `out/manifest.json`.
    pub fn finish(self, out: &Path) -> Result<(), CliError> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        let mut files = Vec::new();
        list_files(out, &mut files)?;
        let mut outputs = BTreeMap::new();
        for f in files {
            let rel = f.strip_prefix(out).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            if rel != "manifest.json" {
                outputs.insert(rel, sha256_file(&f)?);
            }
        }
        let m = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seed: self.seed,
            inputs,
            outputs,
            started_unix: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
        };
        let path = out.join("manifest.json");
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::input(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }
}

/// All regular files below `dir`, sorted.
pub fn list_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
