//! `run_manifest.json`: what is needed to re-run a command bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const GIT_HASH: &str = env!("CAPSULE_GIT_HASH");
pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct Platform {
    pub os: &'static str,
    pub arch: &'static str,
    pub family: &'static str,
    pub endian: &'static str,
    pub pointer_width: usize,
}

impl Platform {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            family: std::env::consts::FAMILY,
            endian: if cfg!(target_endian = "little") {
                "little"
            } else {
                "big"
            },
            pointer_width: usize::BITS as usize,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub build: String,
    pub command: Vec<String>,
    pub config_hash: Option<String>,
    pub dataset_hash: Option<String>,
    /// Input file path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub platform: Platform,
    pub seeds: Vec<u64>,
}

impl RunManifest {
    pub fn new(seeds: Vec<u64>) -> Self {
        Self {
            tool_version: VERSION.to_string(),
            build: GIT_HASH.to_string(),
            command: std::env::args().collect(),
            config_hash: None,
            dataset_hash: None,
            inputs: BTreeMap::new(),
            platform: Platform::current(),
            seeds,
        }
    }

    pub fn input(mut self, path: &Path) -> anyhow::Result<Self> {
        let h = capsule_ldm::trainer::file_hash(path)
            .with_context(|| format!("hashing {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}
