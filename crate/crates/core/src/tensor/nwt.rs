//! NWT weight files.
//!
//! Layout: the magic `NWT1`, a little-endian `u64` header length `H`, `H`
//! bytes of UTF-8 JSON mapping each tensor name to
//! `{"dtype", "shape", "offset", "nbytes"}`, then the raw little-endian
//! payload. Offsets are relative to the first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DType, Tensor};

pub const NWT_MAGIC: [u8; 4] = *b"NWT1";
const PREFIX_LEN: u64 = 12;

pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

pub fn encode_nwt(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(Error::Input("tensor names must be non-empty".into()));
        }
        let nbytes = (t.numel() * t.dtype().size_bytes()) as u64;
        header.insert(
            name.as_str(),
            Entry {
                dtype: t.dtype().name().to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN as usize + header.len() + offset as usize);
    out.extend_from_slice(&NWT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        match t.dtype() {
            DType::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F16 => t
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        }
    }
    Ok(out)
}

/// Byte offset of a serde_json (line, column) position inside `text`.
fn json_byte_offset(text: &[u8], line: usize, column: usize) -> u64 {
    let mut cur_line = 1;
    for (i, &b) in text.iter().enumerate() {
        if cur_line == line {
            return (i + column.saturating_sub(1)) as u64;
        }
        if b == b'\n' {
            cur_line += 1;
        }
    }
    text.len() as u64
}

pub fn decode_nwt(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 4 || bytes[..4] != NWT_MAGIC {
        return Err(Error::format(0, "bad magic, expected NWT1"));
    }
    if bytes.len() < PREFIX_LEN as usize {
        return Err(Error::format(4, "truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let payload_start = PREFIX_LEN
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::format(4, format!("header length {hlen} exceeds file size")))?;
    let header_bytes = &bytes[PREFIX_LEN as usize..payload_start as usize];
    let header: BTreeMap<String, Entry> = serde_json::from_slice(header_bytes).map_err(|e| {
        let pos = PREFIX_LEN + json_byte_offset(header_bytes, e.line(), e.column());
        Error::format(pos, format!("bad header JSON: {e}"))
    })?;
    let payload = &bytes[payload_start as usize..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.len());
    let mut out = TensorMap::new();
    for (name, entry) in &header {
        if name.is_empty() {
            return Err(Error::format(PREFIX_LEN, "empty tensor name in header"));
        }
        let dtype = DType::from_name(&entry.dtype)
            .ok_or_else(|| Error::format(PREFIX_LEN, format!("tensor {name:?}: unknown dtype {:?}", entry.dtype)))?;
        let numel: usize = entry.shape.iter().product();
        let want = (numel * dtype.size_bytes()) as u64;
        if entry.nbytes != want {
            return Err(Error::format(
                PREFIX_LEN,
                format!("tensor {name:?}: nbytes {} but shape needs {want}", entry.nbytes),
            ));
        }
        let end = entry.offset.saturating_add(entry.nbytes);
        if end > payload.len() as u64 {
            return Err(Error::format(
                payload_start + payload.len() as u64,
                format!(
                    "tensor {name:?}: payload truncated, needs bytes up to {}",
                    payload_start + end
                ),
            ));
        }
        spans.push((entry.offset, end, name));
        let raw = &payload[entry.offset as usize..end as usize];
        let data: Vec<f32> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            DType::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                .collect(),
        };
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let pos = payload_start + entry.offset + (i * dtype.size_bytes()) as u64;
            return Err(Error::format(pos, format!("tensor {name:?}: non-finite value")));
        }
        let tensor = match dtype {
            DType::F32 => Tensor::new(entry.shape.clone(), data),
            DType::F16 => Tensor::new_f16(entry.shape.clone(), data),
        }
        .map_err(|e| Error::format(PREFIX_LEN, format!("tensor {name:?}: {e}")))?;
        out.insert(name.clone(), tensor);
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        let (_, prev_end, prev) = w[0];
        let (start, _, name) = w[1];
        if start < prev_end {
            return Err(Error::format(
                payload_start + start,
                format!("tensor {name:?} overlaps {prev:?}"),
            ));
        }
    }
    Ok(out)
}

pub fn read_nwt(path: impl AsRef<Path>) -> Result<TensorMap> {
    decode_nwt(&fs::read(path)?)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_nwt(tensors: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_nwt(tensors)?;
    write_atomic(path.as_ref(), &bytes)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}
