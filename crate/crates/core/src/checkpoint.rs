//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PRUNEKIT"
//! version  u32
//! hlen     u64      byte length of the JSON header
//! header   hlen     UTF-8 JSON (see `Header`)
//! payload  ...      tensors back to back, raw little-endian floats
//! ```
//!
//! The header records the network spec, run metadata and a table of
//! `(name, shape, trainable, offset, len)` entries into the payload, with
//! offsets relative to the payload start.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::importance::ImportanceProfile;
use crate::netspec::NetworkSpec;
use crate::pruning::PruningPlan;
use crate::recovery::HistoryRow;
use crate::scalar::Scalar;
use crate::tensor::{Param, Params, Tensor};

pub const MAGIC: &[u8; 8] = b"PRUNEKIT";
pub const FORMAT_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Header<T> {
    toolkit_version: String,
    dtype: String,
    stage: String,
    seed: u64,
    spec: NetworkSpec,
    config: serde_json::Value,
    importance: Option<ImportanceProfile<T>>,
    plan: Option<PruningPlan>,
    history: Vec<HistoryRow>,
    norm: Option<NormStats>,
    metrics: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

/// A network with its parameters and whatever the producing stage attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Name of the stage that wrote it (`train`, `prune`, ...).
    pub stage: String,
    pub seed: u64,
    pub spec: NetworkSpec,
    pub params: Params<T>,
    /// Resolved run configuration.
    pub config: serde_json::Value,
    pub importance: Option<ImportanceProfile<T>>,
    pub plan: Option<PruningPlan>,
    pub history: Vec<HistoryRow>,
    /// Normalization of the data the network was trained on.
    pub norm: Option<NormStats>,
    pub metrics: BTreeMap<String, f64>,
    pub toolkit_version: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(stage: &str, spec: NetworkSpec, params: Params<T>) -> Self {
        Checkpoint {
            stage: stage.to_string(),
            seed: 0,
            spec,
            params,
            config: serde_json::Value::Null,
            importance: None,
            plan: None,
            history: Vec::new(),
            norm: None,
            metrics: BTreeMap::new(),
            toolkit_version: TOOLKIT_VERSION.to_string(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, p) in self.params.iter() {
            let offset = payload.len() as u64;
            for &v in p.value.data() {
                v.put_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                offset,
                len: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            toolkit_version: self.toolkit_version.clone(),
            dtype: T::DTYPE.to_string(),
            stage: self.stage.clone(),
            seed: self.seed,
            spec: self.spec.clone(),
            config: self.config.clone(),
            importance: self.importance.clone(),
            plan: self.plan.clone(),
            history: self.history.clone(),
            norm: self.norm.clone(),
            metrics: self.metrics.clone(),
            tensors,
        };
        let head = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        let mut out = Vec::with_capacity(20 + head.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint. Tensors stored at another precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let head = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let payload = &bytes[20 + hlen..];
        let header: Header<f64> = serde_json::from_slice(head).map_err(|e| bad(&e.to_string()))?;
        // The header is re-read at the stored precision so β round-trips exactly.
        let importance = match header.dtype.as_str() {
            "f32" => read_importance::<f32, T>(head)?,
            "f64" => read_importance::<f64, T>(head)?,
            d => return Err(bad(&format!("unknown dtype `{d}`"))),
        };
        let mut params = Params::new();
        for t in &header.tensors {
            let (start, len) = (t.offset as usize, t.len as usize);
            let raw = payload
                .get(start..start + len)
                .ok_or_else(|| bad(&format!("tensor `{}` runs past the payload", t.name)))?;
            let data: Vec<T> = match header.dtype.as_str() {
                "f32" => decode::<f32, T>(raw),
                _ => decode::<f64, T>(raw),
            }
            .ok_or_else(|| bad(&format!("tensor `{}` has a ragged payload", t.name)))?;
            params.insert(t.name.clone(), Param::new(Tensor::new(t.shape.clone(), data)?, t.trainable));
        }
        Ok(Checkpoint {
            stage: header.stage,
            seed: header.seed,
            spec: header.spec,
            params,
            config: header.config,
            importance,
            plan: header.plan,
            history: header.history,
            norm: header.norm,
            metrics: header.metrics,
            toolkit_version: header.toolkit_version,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn decode<S: Scalar, T: Scalar>(raw: &[u8]) -> Option<Vec<T>> {
    if !raw.len().is_multiple_of(S::BYTES) {
        return None;
    }
    Some(
        raw.chunks_exact(S::BYTES)
            .map(|c| {
                let v = S::get_le(c);
                if S::DTYPE == T::DTYPE {
                    T::from(v).expect("same type")
                } else {
                    T::of(v.as_f64())
                }
            })
            .collect(),
    )
}

fn read_importance<S: Scalar, T: Scalar>(head: &[u8]) -> Result<Option<ImportanceProfile<T>>> {
    #[derive(Deserialize)]
    #[serde(bound = "S: Scalar")]
    struct Only<S> {
        importance: Option<ImportanceProfile<S>>,
    }
    let only: Only<S> =
        serde_json::from_slice(head).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
    Ok(only.importance.map(|p| p.cast()))
}
