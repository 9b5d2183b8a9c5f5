//! CMCK checkpoint container.
//!
//! ```text
//! "CMCK" | u32 version | u32 header_len | header JSON | f64 payloads | u32 crc32
//! ```
//! The header names every tensor with its group, dtype and shape; payloads
//! follow in header order, little-endian. The CRC covers all preceding bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OptimState;
use crate::error::{Error, Result};
use crate::frontend::FrontendKind;
use crate::nn::{BackendKind, ModelParams, Tensor};

pub const CMCK_MAGIC: [u8; 4] = *b"CMCK";
pub const CMCK_VERSION: u32 = 1;

/// What produced the weights; checked before a checkpoint is reused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub backend: BackendKind,
    pub frontend: FrontendKind,
    pub projected: bool,
    pub input_dim: usize,
}

impl Fingerprint {
    /// Errors with a kind mismatch unless the weights fit `expected`.
    ///
    /// LFCC and unprojected external features carry no front-end parameters,
    /// so weights trained on one can score the other (e.g. a dumped LFCC run).
    pub fn require(&self, expected: &Fingerprint) -> Result<()> {
        let bare = |f: &Fingerprint| matches!(f.frontend, FrontendKind::Lfcc | FrontendKind::External) && !f.projected;
        let frontends_fit = self.frontend == expected.frontend || (bare(self) && bare(expected));
        if frontends_fit
            && self.backend == expected.backend
            && self.projected == expected.projected
            && self.input_dim == expected.input_dim
        {
            return Ok(());
        }
        let show = |f: &Fingerprint| {
            format!("{} back end on {} (project={}, dim {})", f.backend, f.frontend, f.projected, f.input_dim)
        };
        Err(Error::KindMismatch { expected: show(expected), found: show(self) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optim: OptimState,
    pub epoch: usize,
    pub best_dev_loss: f64,
    pub fingerprint: Fingerprint,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    fingerprint: Fingerprint,
    seed: u64,
    epoch: usize,
    best_dev_loss: f64,
    adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    group: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Meta,
    tensors: Vec<Entry>,
}

const GROUPS: [&str; 4] = ["param", "buffer", "adam_m", "adam_v"];

impl Checkpoint {
    fn groups(&self) -> [&BTreeMap<String, Tensor>; 4] {
        [&self.params.params, &self.params.buffers, &self.optim.m, &self.optim.v]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, map) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in map {
                tensors.push(Entry {
                    name: name.clone(),
                    group: group.to_string(),
                    dtype: "f64".into(),
                    shape: t.shape().to_vec(),
                });
                t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
            }
        }
        let header = Header {
            meta: Meta {
                fingerprint: self.fingerprint.clone(),
                seed: self.params.seed,
                epoch: self.epoch,
                best_dev_loss: self.best_dev_loss,
                adam_step: self.optim.step,
            },
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(&CMCK_MAGIC);
        out.extend_from_slice(&CMCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Corrupt("truncated checkpoint".into()));
        }
        if bytes[..4] != CMCK_MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
        }
        if version != CMCK_VERSION {
            return Err(Error::Version(version));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Corrupt("header overruns file".into()))?;
        let header: Header = serde_json::from_slice(&body[12..header_end])
            .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;

        let mut maps: [BTreeMap<String, Tensor>; 4] = Default::default();
        let mut cursor = header_end;
        for entry in header.tensors {
            if entry.dtype != "f64" {
                return Err(Error::Corrupt(format!("unsupported dtype {}", entry.dtype)));
            }
            let slot = GROUPS
                .iter()
                .position(|g| *g == entry.group)
                .ok_or_else(|| Error::Corrupt(format!("unknown tensor group {}", entry.group)))?;
            let n: usize = entry.shape.iter().product();
            let end = cursor + 8 * n;
            if end > body.len() {
                return Err(Error::Corrupt("payload truncated".into()));
            }
            let data = body[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor = end;
            let t = Tensor::new(entry.shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            maps[slot].insert(entry.name, t);
        }
        if cursor != body.len() {
            return Err(Error::Corrupt("trailing bytes after payload".into()));
        }
        let [params, buffers, m, v] = maps;
        let fp = header.meta.fingerprint;
        Ok(Self {
            params: ModelParams { backend: fp.backend, input_dim: fp.input_dim, seed: header.meta.seed, params, buffers },
            optim: OptimState { step: header.meta.adam_step, m, v },
            epoch: header.meta.epoch,
            best_dev_loss: header.meta.best_dev_loss,
            fingerprint: fp,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
