//! Parameter checkpoints.
//!
//! Layout: `TGMT1\n`, then for each tensor in name order a name line, a line
//! of space-separated dimensions, and the row-major values as little-endian
//! `f64`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"TGMT1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(offset: usize, detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        offset,
        detail: detail.into(),
    }
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, tensor) in params.iter() {
        out.extend_from_slice(name.as_bytes());
        out.push(b'\n');
        let dims: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
        out.extend_from_slice(dims.join(" ").as_bytes());
        out.push(b'\n');
        for &x in tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, CheckpointError> {
    let start = *pos;
    let rest = &bytes[start..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed(start, "unterminated line"))?;
    *pos = start + end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| malformed(start, "line is not UTF-8"))
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
    if !bytes.starts_with(MAGIC) {
        return Err(malformed(0, "missing TGMT1 header"));
    }
    let mut pos = MAGIC.len();
    let mut params = ParamSet::new();
    let mut last: Option<String> = None;
    while pos < bytes.len() {
        let name_at = pos;
        let name = take_line(bytes, &mut pos)?;
        if name.is_empty() {
            return Err(malformed(name_at, "empty tensor name"));
        }
        if last.as_deref().is_some_and(|prev| prev >= name) {
            return Err(malformed(name_at, "tensor names are not in strictly increasing order"));
        }
        let shape_at = pos;
        let shape_line = take_line(bytes, &mut pos)?;
        let shape: Vec<usize> = shape_line
            .split(' ')
            .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
            .collect::<Option<_>>()
            .ok_or_else(|| malformed(shape_at, format!("bad shape line {shape_line:?}")))?;
        let byte_len = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed(shape_at, "tensor size overflows"))?;
        if bytes.len() - pos < byte_len {
            return Err(malformed(pos, format!("tensor {name:?} is truncated")));
        }
        let data: Vec<f64> = bytes[pos..pos + byte_len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        pos += byte_len;
        let tensor = Tensor::new(shape, data).map_err(|e| malformed(shape_at, e.to_string()))?;
        params.insert(name, tensor);
        last = Some(name.to_string());
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    decode(&fs::read(path)?)
}
