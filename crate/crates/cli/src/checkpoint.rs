//! Binary checkpoints: `CHOR`, a little-endian `u32` version, a `u64` header
//! length, the JSON header, then every tensor as little-endian `f32`.

use std::path::Path;

use chorus_core::encoders::{Dims, Encoders};
use chorus_core::gating::{FeatureStats, GateMask, HeadKind, HeadParams, HeadShape};
use chorus_core::numerics::{ParamStore, Tensor};
use chorus_core::pretraining::RegimeName;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"CHOR";
pub const VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of `f32` values.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadMeta {
    pub kind: HeadKind,
    pub mask: GateMask,
    pub shape: HeadShape,
    pub dropout: f64,
    pub gate_stats: FeatureStats,
    pub sensor_stats: FeatureStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: Dims,
    pub regime: Option<RegimeName>,
    pub seed: u64,
    pub head: Option<HeadMeta>,
    pub tensors: Vec<TensorEntry>,
}

/// Frozen encoders (with decoders) and, after customization, a head.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub regime: Option<RegimeName>,
    pub seed: u64,
    pub encoders: Encoders<f32>,
    pub head: Option<HeadParams<f32>>,
}

fn push_tensors<'a>(
    entries: &mut Vec<TensorEntry>,
    blob: &mut Vec<u8>,
    tensors: impl Iterator<Item = (&'a str, &'a Tensor<f32>)>,
) {
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            len: t.data().len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn header(&self) -> Header {
        self.encode().0
    }

    fn encode(&self) -> (Header, Vec<u8>) {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        push_tensors(&mut tensors, &mut blob, self.encoders.store.iter());
        if let Some(h) = &self.head {
            push_tensors(&mut tensors, &mut blob, h.store.iter());
        }
        let head = self.head.as_ref().map(|h| HeadMeta {
            kind: h.kind,
            mask: h.mask,
            shape: h.shape,
            dropout: h.dropout,
            gate_stats: h.stats.clone(),
            sensor_stats: h.sensor_stats.clone(),
        });
        let header = Header {
            dims: self.encoders.dims,
            regime: self.regime,
            seed: self.seed,
            head,
            tensors,
        };
        (header, blob)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (header, blob) = self.encode();
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    /// Parses and validates a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let bad = |m: String| CliError::format(path, m);
        if bytes.len() < PREFIX || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let hend = (PREFIX as u64)
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| bad("header length exceeds the file".into()))? as usize;
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX..hend]).map_err(|e| bad(format!("invalid header: {e}")))?;
        let blob = &bytes[hend..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let expect: usize = t.shape.iter().product();
            if expect as u64 != t.len {
                return Err(bad(format!("tensor {} has {} values but shape {:?}", t.name, t.len, t.shape)));
            }
            let end = t
                .len
                .checked_mul(4)
                .and_then(|b| b.checked_add(t.offset))
                .filter(|&e| e <= blob.len() as u64)
                .ok_or_else(|| bad(format!("tensor {} lies outside the blob", t.name)))?;
            spans.push((t.offset, end, &t.name));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        let covered: u64 = spans.iter().map(|s| s.1 - s.0).sum();
        if covered != blob.len() as u64 {
            return Err(bad("blob has bytes not described by the manifest".into()));
        }

        let mut enc_store = ParamStore::new();
        let mut head_store = ParamStore::new();
        for t in &header.tensors {
            let start = t.offset as usize;
            let data: Vec<f32> = blob[start..start + 4 * t.len as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::from_vec(&t.shape, data);
            if t.name.starts_with("head.") {
                head_store.insert(&t.name, tensor);
            } else {
                enc_store.insert(&t.name, tensor);
            }
        }
        let encoders = Encoders::from_store(header.dims, enc_store)?;
        let head = match header.head {
            Some(m) => Some(HeadParams::from_store(
                m.kind,
                m.mask,
                m.shape,
                m.dropout,
                m.gate_stats,
                m.sensor_stats,
                head_store,
            )?),
            None if !head_store.is_empty() => {
                return Err(bad("head tensors present without head metadata".into()));
            }
            None => None,
        };
        Ok(Checkpoint {
            regime: header.regime,
            seed: header.seed,
            encoders,
            head,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::file(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn save(&self, path: &Path, force: bool) -> CliResult<()> {
        write_atomic(path, &self.to_bytes(), force)
    }
}
