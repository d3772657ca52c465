use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const RUN_MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub module_versions: BTreeMap<&'static str, String>,
    pub root_seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub timings: Vec<StageTiming>,
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let mut f = std::fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf).with_context(|| format!("hashing {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileHash {
        path: path.to_path_buf(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

fn module_versions() -> BTreeMap<&'static str, String> {
    use clevercatch_core::{detector, embedding, features, simulator};
    BTreeMap::from([
        ("clevercatch-cli", env!("CARGO_PKG_VERSION").to_string()),
        ("clevercatch-core", clevercatch_core::VERSION.to_string()),
        ("detector_format", detector::DETECTOR_FORMAT_VERSION.to_string()),
        ("encoder_format", embedding::ENCODER_FORMAT_VERSION.to_string()),
        ("features_format", features::FEATURES_FORMAT_VERSION.to_string()),
        ("simulator_manifest", simulator::MANIFEST_VERSION.to_string()),
    ])
}

/// Collects inputs, outputs and stage timings for one command.
pub struct Recorder {
    command: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: Vec<StageTiming>,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn stage<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.timings.push(StageTiming {
            stage: stage.to_owned(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    /// Hashes everything and writes `run.<command>.json` into `dir` via a
    /// temporary file and rename.
    pub fn finish(mut self, config: &RunConfig, dir: &Path) -> Result<PathBuf> {
        self.timings.push(StageTiming {
            stage: "total".into(),
            seconds: self.started.elapsed().as_secs_f64(),
        });
        let manifest = RunManifest {
            format_version: RUN_MANIFEST_VERSION,
            command: self.command.clone(),
            module_versions: module_versions(),
            root_seed: config.seed,
            config: config.clone(),
            inputs: self.inputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
            timings: self.timings,
        };
        let path = dir.join(format!("run.{}.json", self.command));
        let tmp = dir.join(format!(".run.{}.json.tmp", self.command));
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(path)
    }
}
