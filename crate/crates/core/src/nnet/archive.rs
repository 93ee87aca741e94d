//! Tensor archive: a magic line, one JSON header line, then every tensor's
//! values as little-endian `f32` in header order.

use super::{NnError, Result, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8] = b"ANATOCKPT 1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn err(path: &Path, msg: impl Into<String>) -> NnError {
    NnError::Archive {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes through a sibling temporary file and a rename, so a reader never
/// observes a partial archive.
pub fn write_archive<'a, S: AsRef<str>>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: impl IntoIterator<Item = (S, &'a Tensor<f32>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.as_ref().to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut bytes = MAGIC.to_vec();
    bytes.extend(serde_json::to_vec(&header).map_err(|e| err(path, e.to_string()))?);
    bytes.push(b'\n');
    for (_, t) in &tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let io = |source| NnError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| err(path, "bad magic"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err(path, "missing header line"))?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| err(path, format!("header: {e}")))?;
    let mut payload = &rest[nl + 1..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if payload.len() < 4 * n {
            return Err(err(path, format!("truncated tensor {}", e.name)));
        }
        let data = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        payload = &payload[4 * n..];
        let t = Tensor::new(e.shape, data).map_err(|x| err(path, x.to_string()))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(err(path, format!("duplicate tensor {}", e.name)));
        }
    }
    if !payload.is_empty() {
        return Err(err(path, "trailing bytes after last tensor"));
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}
