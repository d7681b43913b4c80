//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MKGRCKPT"            magic, 8 bytes
//! u32                    format version
//! u64                    header length in bytes
//! header                 UTF-8 JSON: kind, seed, step, metadata, tensor directory
//! f64 * N                tensor values in directory order, raw IEEE-754 bits
//! ```
//!
//! Values are stored bit-exact, so a save/load round trip is lossless.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MKGRCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    seed: u64,
    step: u64,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub step: u64,
    pub metadata: BTreeMap<String, String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, params: ParamSet) -> Self {
        Self {
            kind: kind.into(),
            seed: 0,
            step: 0,
            metadata: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            seed: self.seed,
            step: self.step,
            metadata: self.metadata.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + self.params.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let hlen = u64::from_le_bytes(len) as usize;
        if hlen > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..hlen])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        r = &r[hlen..];
        let mut params = ParamSet::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated tensor `{}`", entry.name)));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[n * 8..];
            params.insert(entry.name, Tensor::new(entry.shape, data)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            kind: header.kind,
            seed: header.seed,
            step: header.step,
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}
