//! Versioned binary checkpoints of the full training state.
//!
//! Layout: magic, little-endian `u32` format version, `u64` header length,
//! JSON header, `f32` payload buffers in header order, then a SHA-256 of
//! everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{ensure, EvilError, Result};
use crate::nn::{BackboneConfig, Sgd};
use crate::trainer::{BestSoFar, TrainState};

pub const MAGIC: &[u8; 8] = b"EVILCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    iter: u64,
    seeds: (u64, u64),
    /// `None` until the first validation.
    best_score: Option<f64>,
    best_iter: u64,
    config: String,
    /// Element counts of the payload buffers, in order: E-Net params, E-Net
    /// stats, E-Net velocity, S-Net params, S-Net stats, S-Net velocity.
    buffers: Vec<usize>,
}

/// A training state together with the config that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub best: BestSoFar,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, state: &TrainState, best: BestSoFar) -> Self {
        Checkpoint {
            config: config.clone(),
            state: state.clone(),
            best,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let buffers: [&[f32]; 6] = [
            s.nets.enet.params(),
            s.nets.enet.running_stats(),
            &s.opt_enet.velocity,
            s.nets.snet.params(),
            s.nets.snet.running_stats(),
            &s.opt_snet.velocity,
        ];
        let header = Header {
            format: "evil-checkpoint".into(),
            iter: s.iter,
            seeds: s.nets.seeds,
            best_score: Some(self.best.score).filter(|v| v.is_finite()),
            best_iter: self.best.iter,
            config: self.config.to_toml(),
            buffers: buffers.iter().map(|b| b.len()).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + 4 * buffers.iter().map(|b| b.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in buffers {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| EvilError::Checkpoint(m.to_string());
        ensure!(bytes.len() >= 8 + 4 + 8 + 32, Checkpoint, "file is truncated");
        ensure!(&bytes[..8] == MAGIC, Checkpoint, "not a checkpoint file (bad magic)");
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        ensure!(
            version == FORMAT_VERSION,
            Checkpoint,
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        );
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        ensure!(Sha256::digest(body).as_slice() == digest, Checkpoint, "checksum mismatch, file is corrupted");
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[20..hend]).map_err(|e| bad(&format!("bad header: {e}")))?;
        ensure!(header.format == "evil-checkpoint", Checkpoint, "unknown format tag {}", header.format);
        ensure!(header.buffers.len() == 6, Checkpoint, "expected 6 buffers, found {}", header.buffers.len());
        let total: usize = header.buffers.iter().sum();
        ensure!(body.len() - hend == 4 * total, Checkpoint, "payload size does not match header");
        let mut floats = body[hend..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut bufs: Vec<Vec<f32>> = header.buffers.iter().map(|&n| floats.by_ref().take(n).collect()).collect();

        let config = RunConfig::from_toml_str(&header.config)?;
        let mut state = TrainState::new(&config)?;
        ensure!(
            state.nets.seeds == header.seeds,
            Checkpoint,
            "seeds {:?} disagree with the embedded config {:?}",
            header.seeds,
            state.nets.seeds
        );
        let snet_velocity = bufs.pop().expect("6 buffers");
        let snet_stats = bufs.pop().expect("6 buffers");
        let snet_params = bufs.pop().expect("6 buffers");
        let enet_velocity = bufs.pop().expect("6 buffers");
        let enet_stats = bufs.pop().expect("6 buffers");
        let enet_params = bufs.pop().expect("6 buffers");
        state.nets.enet.set_state(enet_params, enet_stats)?;
        state.nets.snet.set_state(snet_params, snet_stats)?;
        let n = state.nets.enet.params().len();
        ensure!(
            enet_velocity.len() == n && snet_velocity.len() == n,
            Checkpoint,
            "optimizer state does not match the parameter count {n}"
        );
        state.opt_enet = Sgd { velocity: enet_velocity, ..state.opt_enet };
        state.opt_snet = Sgd { velocity: snet_velocity, ..state.opt_snet };
        state.iter = header.iter;
        Ok(Checkpoint {
            config,
            state,
            best: BestSoFar {
                score: header.best_score.unwrap_or(f64::NEG_INFINITY),
                iter: header.best_iter,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so a crash never leaves a half-written file
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| EvilError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| EvilError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EvilError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            EvilError::Checkpoint(m) => EvilError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the stored architecture equals `model`.
    pub fn check_model(&self, model: &BackboneConfig) -> Result<()> {
        let have = &self.config.model;
        ensure!(
            have.in_channels == model.in_channels
                && have.num_classes == model.num_classes
                && have.base_width == model.base_width
                && have.depth == model.depth,
            Checkpoint,
            "architecture mismatch: checkpoint has {have:?}, config asks for {model:?}"
        );
        Ok(())
    }
}
