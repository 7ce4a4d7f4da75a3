//! Binary checkpoint: an 8-byte little-endian header length, a JSON header,
//! then little-endian f64 payloads for parameters, first moments and second
//! moments, each in header entry order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{NetConfig, Network};
use super::optim::AdamState;
use super::tape::ValueGrid;
use super::NetError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Parameter fingerprint at save time.
    pub fingerprint: String,
    pub net: NetConfig,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: u64,
    pub adam_step: u64,
    pub entries: Vec<CheckpointEntry>,
    /// Caller-defined metadata (e.g. the training config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<ValueGrid>,
    pub adam: AdamState,
}

impl Checkpoint {
    fn names(&self) -> Vec<String> {
        self.header.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Copies parameters into an existing network, rejecting any shape or
    /// name mismatch.
    pub fn apply_to(&self, net: &mut Network) -> Result<(), NetError> {
        net.params_mut().assign(&self.names(), self.params.clone())
    }

    /// Rebuilds the network described by the header.
    pub fn into_network(self) -> Result<(Network, AdamState, CheckpointHeader), NetError> {
        let mut net = Network::new(self.header.net.clone(), self.header.seed)?;
        self.apply_to(&mut net)?;
        Ok((net, self.adam, self.header))
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |source| NetError::Io { path: path.to_path_buf(), source }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> NetError {
    NetError::CorruptCheckpoint { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    adam: &AdamState,
    epoch: u64,
    extra: serde_json::Value,
) -> Result<(), NetError> {
    let params = net.params();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        fingerprint: params.fingerprint(),
        net: net.config().clone(),
        seed: params.seed(),
        epoch,
        adam_step: adam.step,
        entries: params
            .names()
            .iter()
            .zip(params.grids())
            .map(|(n, g)| CheckpointEntry { name: n.clone(), shape: g.shape() })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(8 + json.len() + 24 * params.scalar_count());
    buf.extend((json.len() as u64).to_le_bytes());
    buf.extend(&json);
    for grids in [params.grids(), &adam.m[..], &adam.v[..]] {
        for g in grids {
            for v in g.data() {
                buf.extend(v.to_le_bytes());
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(&buf).map_err(io(&tmp))?;
    f.sync_all().map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() < 8 {
        return Err(corrupt(path, "truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8usize.saturating_add(hlen)).ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| corrupt(path, e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(NetError::VersionMismatch { path: path.to_path_buf(), found: header.version, expected: CHECKPOINT_VERSION });
    }
    let count: usize = header.entries.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    let payload = &bytes[8 + hlen..];
    if payload.len() != 3 * 8 * count {
        return Err(corrupt(path, format!("payload has {} bytes, expected {}", payload.len(), 24 * count)));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut section = || -> Vec<ValueGrid> {
        header
            .entries
            .iter()
            .map(|e| ValueGrid::from_vec(e.shape[0], e.shape[1], values.by_ref().take(e.shape[0] * e.shape[1]).collect()))
            .collect()
    };
    let params = section();
    let m = section();
    let v = section();
    let ckpt = Checkpoint { adam: AdamState { step: header.adam_step, m, v }, params, header };
    let mut probe = super::params::ParamStore::new(ckpt.header.seed);
    for (e, g) in ckpt.header.entries.iter().zip(&ckpt.params) {
        probe.add(&e.name, g.clone());
    }
    if probe.fingerprint() != ckpt.header.fingerprint {
        return Err(corrupt(path, "parameter fingerprint does not match payload"));
    }
    Ok(ckpt)
}
