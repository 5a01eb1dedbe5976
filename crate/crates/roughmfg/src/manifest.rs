//! Run manifests. The hash covers everything that determines the numbers
//! (resolved configuration, seed, crate versions) and nothing else, so two
//! runs of the same configuration embed the same hash.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{RunError, RunResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub hash: String,
    pub command: String,
    pub seed: u64,
    pub strict: bool,
    pub versions: Versions,
    pub config: Config,
    pub files: Vec<String>,
    pub threads: usize,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub roughmfg: &'static str,
    pub arch: &'static str,
}

pub fn config_hash(cfg: &Config, command: &str, strict: bool) -> String {
    let mut h = Sha256::new();
    h.update(b"roughmfg-manifest\0");
    h.update(VERSION.as_bytes());
    h.update(b"\0");
    h.update(command.as_bytes());
    h.update(b"\0");
    h.update([strict as u8]);
    h.update(cfg.to_toml().as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> RunResult<()> {
        let file = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&file, text).map_err(|e| RunError::io(file, e))
    }
}

/// Serialises `value` next to the manifest hash.
pub fn write_json<T: Serialize>(file: &Path, hash: &str, value: &T) -> RunResult<()> {
    #[derive(Serialize)]
    struct Wrapped<'a, T> {
        manifest_hash: &'a str,
        #[serde(flatten)]
        body: &'a T,
    }
    let text = serde_json::to_string_pretty(&Wrapped {
        manifest_hash: hash,
        body: value,
    })?;
    std::fs::write(file, text).map_err(|e| RunError::io(file, e))
}
