//! Run manifests: every artifact-producing command records what ran, with
//! digests of its configuration and inputs, so reruns are checkable.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_digest: String,
    pub input_digests: Vec<(String, String)>,
    pub started_at_unix: f64,
    pub finished_at_unix: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_digest: String::new(),
            input_digests: Vec::new(),
            started_at_unix: now(),
            finished_at_unix: 0.0,
        }
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) {
        let bytes = serde_json::to_vec(config).unwrap_or_default();
        self.config_digest = hex_digest(&bytes);
    }

    pub fn add_input(&mut self, path: &Path) {
        let digest = std::fs::read(path).map(|b| hex_digest(&b)).unwrap_or_default();
        self.input_digests.push((path.display().to_string(), digest));
    }

    pub fn finish(mut self, path: &Path) -> Result<(), simeq_core::io::IoError> {
        self.finished_at_unix = now();
        simeq_core::io::write_json(path, &self)
    }
}
