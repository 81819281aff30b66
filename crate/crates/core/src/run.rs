//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{EvilError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// Root directory for run artifacts: `$EVIL_RUN_DIR` if set, else `runs/`.
pub fn run_root() -> PathBuf {
    std::env::var_os("EVIL_RUN_DIR")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Git-style content hash: SHA-256 of `blob <len>\0<content>`, hex encoded.
pub fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub enet: u64,
    pub snet: u64,
    pub data: u64,
    pub split: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub config_hash: String,
    pub seeds: RunSeeds,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        let text = config.to_toml();
        let t = &config.train;
        RunManifest {
            command: command.to_string(),
            config_hash: content_hash(&text),
            config: text,
            seeds: RunSeeds {
                enet: t.seed_enet,
                snet: t.seed_snet,
                data: t.data_seed,
                split: config.data.split_seed,
            },
            started_unix: now(),
            finished_unix: None,
            artifacts: Vec::new(),
        }
    }

    /// Default run directory name: command plus the first 12 hash digits.
    pub fn default_dir_name(&self) -> String {
        format!("{}-{}", self.command, &self.config_hash[..12])
    }

    pub fn finish(&mut self, mut artifacts: Vec<String>) {
        artifacts.sort();
        artifacts.dedup();
        self.artifacts = artifacts;
        self.finished_unix = Some(now());
    }

    /// Writes the manifest and the config echo into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| EvilError::io(dir, e))?;
        let echo = dir.join(CONFIG_ECHO_FILE);
        fs::write(&echo, &self.config).map_err(|e| EvilError::io(&echo, e))?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| EvilError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| EvilError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| EvilError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn hash_matches_git_blob_scheme() {
        let want: String = Sha256::digest(b"blob 5\0hello").iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(content_hash("hello"), want);
    }

    #[test]
    fn manifests_differ_only_in_timestamps() {
        let cfg = RunConfig::preset(Preset::Desk);
        let mut a = RunManifest::start("train", &cfg);
        let mut b = RunManifest::start("train", &cfg);
        a.finish(vec!["metrics.csv".into()]);
        b.finish(vec!["metrics.csv".into()]);
        (b.started_unix, b.finished_unix) = (a.started_unix, a.finished_unix);
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(dir.path()).unwrap(), a);
        let echo = fs::read_to_string(dir.path().join(CONFIG_ECHO_FILE)).unwrap();
        assert_eq!(RunConfig::from_toml_str(&echo).unwrap(), cfg);
    }
}
