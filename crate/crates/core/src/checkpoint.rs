//! Binary parameter store.
//!
//! Layout, all little-endian: `"MMLC"` | u32 version | u32 entry count |
//! per entry `u32 key length | UTF-8 key | u8 rank | u32 dims… | f32 payload…`.
//! Assembly id, merge provenance and validation mAP live in a
//! `<file>.meta.json` sidecar.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParamMap;
use crate::registry::{parse_key, Family};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMLC";
pub const FORMAT_VERSION: u32 = 1;
/// Files above this size are refused on save and on load.
pub const MAX_BYTES: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint ({reason})")]
    Format { path: String, reason: String },
    #[error("{path}: format version {found} is not supported by this reader (version {expected})")]
    Version { path: String, found: u32, expected: u32 },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("{path}: {bytes} bytes exceeds the {limit}-byte limit")]
    TooLarge { path: String, bytes: u64, limit: u64 },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct MergeEvent {
    pub round: usize,
    pub strategy: String,
    /// Assembly ids of the models whose weights were combined.
    pub contributors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub assembly_id: String,
    pub params: ParamMap,
    pub provenance: Vec<MergeEvent>,
    pub val_map: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct Sidecar {
    format_version: u32,
    assembly_id: String,
    provenance: Vec<MergeEvent>,
    #[serde(rename = "val-mAP")]
    val_map: Option<f64>,
}

impl Checkpoint {
    pub fn new(assembly_id: impl Into<String>, params: ParamMap) -> Self {
        Self {
            assembly_id: assembly_id.into(),
            params,
            provenance: Vec::new(),
            val_map: None,
        }
    }

    /// Checks key grammar and payload sizes.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        for (k, t) in &self.params {
            if parse_key(k).is_none() {
                return Err(CheckpointError::Invalid(format!("key {k:?} does not follow family/variant/block-i/name")));
            }
            if t.shape().iter().product::<usize>() != t.len() {
                return Err(CheckpointError::Invalid(format!("payload of {k} does not match its shape")));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (k, t) in &self.params {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &str) -> Result<ParamMap, CheckpointError> {
        let corrupt = |reason: &str| CheckpointError::Corrupt {
            path: path.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Format {
                path: path.to_string(),
                reason: "bad magic".into(),
            });
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                path: path.to_string(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        let mut params = ParamMap::new();
        for _ in 0..n {
            let klen = r.u32().ok_or_else(|| corrupt("truncated key length"))? as usize;
            let key = r.take(klen).ok_or_else(|| corrupt("truncated key"))?;
            let key = std::str::from_utf8(key).map_err(|_| corrupt("key is not UTF-8"))?.to_string();
            let rank = r.take(1).ok_or_else(|| corrupt("truncated rank"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| corrupt("truncated shape"))? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("shape overflows"))?;
            let raw = r
                .take(count.checked_mul(4).ok_or_else(|| corrupt("shape overflows"))?)
                .ok_or_else(|| corrupt(&format!("truncated payload for {key}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
            if params.insert(key.clone(), t).is_some() {
                return Err(corrupt(&format!("duplicate key {key}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(params)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn lock_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".lock");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        // persist the rename itself; not every platform can open directories
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

/// Writes the binary file and its sidecar under an exclusive advisory lock,
/// each via a temporary file and rename.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    c.validate()?;
    let bytes = c.encode();
    if bytes.len() as u64 > MAX_BYTES {
        return Err(CheckpointError::TooLarge {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            limit: MAX_BYTES,
        });
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let lp = lock_path(path);
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lp)
        .map_err(io_err(&lp))?;
    lock.lock().map_err(io_err(&lp))?;
    let meta = Sidecar {
        format_version: FORMAT_VERSION,
        assembly_id: c.assembly_id.clone(),
        provenance: c.provenance.clone(),
        val_map: c.val_map,
    };
    let json = serde_json::to_vec_pretty(&meta).expect("sidecar serializes");
    let side = sidecar_path(path);
    let res = write_atomic(path, &bytes).and_then(|_| write_atomic(&side, &json));
    let _ = lock.unlock();
    res
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let name = path.display().to_string();
    let len = fs::metadata(path).map_err(io_err(path))?.len();
    if len > MAX_BYTES {
        return Err(CheckpointError::TooLarge {
            path: name,
            bytes: len,
            limit: MAX_BYTES,
        });
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let params = Checkpoint::decode(&bytes, &name)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|e| CheckpointError::Format {
        path: side.display().to_string(),
        reason: e.to_string(),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            path: side.display().to_string(),
            found: meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let c = Checkpoint {
        assembly_id: meta.assembly_id,
        params,
        provenance: meta.provenance,
        val_map: meta.val_map,
    };
    c.validate()?;
    Ok(c)
}

/// Every parameter under `family/variant/`.
pub fn extract_module_weights(params: &ParamMap, family: Family, variant: &str) -> ParamMap {
    let prefix = format!("{}/{}/", family.as_str(), variant);
    params
        .range(prefix.clone()..)
        .take_while(|(k, _)| k.starts_with(&prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}
