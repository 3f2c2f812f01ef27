use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::Summary;

/// Wall-clock seconds per named stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageTimer {
    pub stages: BTreeMap<String, f64>,
}

impl StageTimer {
    /// Runs `f`, charging its time to `stage` and tagging its error with the
    /// stage name.
    pub fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.add(stage, start.elapsed().as_secs_f64());
        out.map_err(|e| e.in_stage(stage))
    }

    pub fn add(&mut self, stage: &str, seconds: f64) {
        *self.stages.entry(stage.to_string()).or_default() += seconds;
    }

    pub fn merge(&mut self, other: &StageTimer) {
        for (k, v) in &other.stages {
            self.add(k, *v);
        }
    }

    pub fn total(&self) -> f64 {
        self.stages.values().sum()
    }

    /// Charges whatever part of `wall` no stage claimed to `other`.
    pub fn close(&mut self, wall: f64) {
        let rest = wall - self.total();
        if rest > 0.0 {
            self.add("other", rest);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: usize,
    pub objects: usize,
    pub seconds: f64,
    /// Frames where refinement fell back to the propagated mask.
    pub refine_fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub backend: String,
    pub parameter_checksum: String,
    pub workers: usize,
    /// Per-stage seconds. With one worker they sum to `wall_seconds`; with
    /// more they sum busy time over all workers.
    pub stages: StageTimer,
    pub wall_seconds: f64,
    pub sequences: Vec<SequenceRecord>,
    /// SHA-256 of every written mask, keyed by path relative to the output.
    pub artifacts: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<Summary>,
}

impl RunRecord {
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::eval::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut file, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

/// Seed for one stream of randomness, derived from the run seed and labels.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}
