//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian u64 manifest length, SHA-256 of the
//! manifest, the JSON manifest, then the payload: for each network in
//! manifest order its parameters, first moments and second moments as
//! little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, AirlightTally, HistoryEntry, Role, TrainConfig, TrainState};
use crate::data::io::write_atomic;
use crate::data::Cursors;
use crate::error::{Error, Result};
use crate::networks::{ArchitectureSpec, NetworkKind, NetworkParams, UpsampleMode};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"D2RCKPT1";
const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 8 + 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub role: Role,
    pub kind: NetworkKind,
    pub upsample: UpsampleMode,
    pub spec_hash: String,
    pub seed: u64,
    /// `(weight, bias)` lengths per layer.
    pub layer_lengths: Vec<(usize, usize)>,
    /// Position of the parameter block in the payload, in f32 units.
    pub offset: u64,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub iteration: u64,
    pub cursors: Cursors,
    pub config: TrainConfig,
    pub networks: Vec<NetworkEntry>,
    pub history: Vec<HistoryEntry>,
    pub airlight_tally: AirlightTally,
    pub payload_len: u64,
    pub payload_sha256: String,
}

fn push_f32(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises `state` with a snapshot of `config` and writes it atomically.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut networks = Vec::with_capacity(Role::ALL.len());
    for r in Role::ALL {
        let net = state.net(r);
        let m = &state.moments[r.index()];
        networks.push(NetworkEntry {
            role: r,
            kind: net.kind(),
            upsample: net.arch().upsample,
            spec_hash: net.arch().spec_hash(),
            seed: net.seed(),
            layer_lengths: net.layers().iter().map(|l| (l.weight.len(), l.bias.len())).collect(),
            offset: (payload.len() / 4) as u64,
            adam_step: m.t,
        });
        push_f32(&mut payload, net.values());
        push_f32(&mut payload, m.m.iter().copied());
        push_f32(&mut payload, m.v.iter().copied());
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        iteration: state.iteration,
        cursors: state.cursors,
        config: config.clone(),
        networks,
        history: state.history.iter().copied().collect(),
        airlight_tally: state.airlight_tally,
        payload_len: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut bytes = Vec::with_capacity(PREFIX + json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&Sha256::digest(&json));
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    write_atomic(path, &bytes)
}

fn split(bytes: &[u8]) -> Result<(CheckpointManifest, &[u8])> {
    if bytes.len() < PREFIX || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("missing checkpoint header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[PREFIX..];
    if body.len() < len {
        return Err(Error::Integrity(format!("manifest truncated: {len} bytes declared, {} present", body.len())));
    }
    let json = &body[..len];
    if Sha256::digest(json).as_slice() != &bytes[16..48] {
        return Err(Error::Integrity("manifest checksum mismatch".into()));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Integrity(format!("unsupported format version {}", manifest.format_version)));
    }
    Ok((manifest, &body[len..]))
}

/// Reads and verifies only the manifest.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    split(&bytes).map(|(m, _)| m)
}

/// Restores the state and the config snapshot stored with it.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, payload) = split(&bytes)?;
    if payload.len() as u64 != manifest.payload_len {
        return Err(Error::Integrity(format!(
            "payload truncated: {} bytes declared, {} present",
            manifest.payload_len,
            payload.len()
        )));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let roles: Vec<Role> = manifest.networks.iter().map(|n| n.role).collect();
    if roles != Role::ALL {
        return Err(Error::Integrity(format!("unexpected network roster {roles:?}")));
    }
    let mut nets = Vec::with_capacity(roles.len());
    let mut moments = Vec::with_capacity(roles.len());
    for e in &manifest.networks {
        let arch = ArchitectureSpec::new(e.kind, e.upsample);
        let expected = arch.spec_hash();
        if e.spec_hash != expected || e.kind != e.role.kind() {
            return Err(Error::SpecHashMismatch {
                network: e.role.name().to_string(),
                expected,
                found: e.spec_hash.clone(),
            });
        }
        let n = arch.parameter_count();
        let start = e.offset as usize;
        let block = floats
            .get(start..start + 3 * n)
            .ok_or_else(|| Error::Integrity(format!("{} block out of range", e.role.name())))?;
        let mut rest = &block[..n];
        let mut buffers = Vec::with_capacity(e.layer_lengths.len());
        for &(wl, bl) in &e.layer_lengths {
            if rest.len() < wl + bl {
                return Err(Error::Integrity(format!("{} layer table exceeds its block", e.role.name())));
            }
            buffers.push((rest[..wl].to_vec(), rest[wl..wl + bl].to_vec()));
            rest = &rest[wl + bl..];
        }
        nets.push(NetworkParams::from_parts(arch, buffers, e.seed).map_err(|err| Error::Integrity(err.to_string()))?);
        moments.push(AdamState {
            m: block[n..2 * n].to_vec(),
            v: block[2 * n..].to_vec(),
            t: e.adam_step,
        });
    }
    let state = TrainState {
        nets,
        moments,
        iteration: manifest.iteration,
        cursors: manifest.cursors,
        history: manifest.history.into_iter().collect(),
        airlight_tally: manifest.airlight_tally,
    };
    Ok((state, manifest.config))
}
