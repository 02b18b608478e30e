//! Shared on-disk layout for checkpoints and cluster models:
//! 4-byte magic, `u32` version, `u32` descriptor length, UTF-8 descriptor,
//! then the raw little-endian `f64` payload in descriptor order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) const VERSION: u32 = 1;

/// Named tensor in a container payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn tensor_line(t: &Tensor) -> String {
    let dims: Vec<String> = t.shape.iter().map(ToString::to_string).collect();
    format!("tensor {} {}", t.name, dims.join(" "))
}

/// Encodes a container into bytes.
pub(crate) fn encode(magic: &[u8; 4], descriptor: &str, payload: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + descriptor.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a container into descriptor text and payload values.
pub(crate) fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<(String, Vec<f64>)> {
    if bytes.len() < 12 {
        return Err(Error::format("file shorter than header"));
    }
    if &bytes[0..4] != magic {
        return Err(Error::format(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let desc_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let desc_end = 12usize
        .checked_add(desc_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("descriptor length exceeds file size"))?;
    let descriptor = std::str::from_utf8(&bytes[12..desc_end])
        .map_err(|_| Error::format("descriptor is not UTF-8"))?
        .to_string();
    let body = &bytes[desc_end..];
    if body.len() % 8 != 0 {
        return Err(Error::format("payload is not a whole number of f64 values"));
    }
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((descriptor, payload))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses `tensor <name> <dims...>` lines and slices the payload accordingly.
/// Non-tensor lines are returned untouched for the caller to interpret.
pub(crate) fn split_tensors(
    descriptor: &str,
    payload: &[f64],
) -> Result<(Vec<String>, Vec<Tensor>)> {
    let mut other = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for line in descriptor.lines() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            other.push(line.to_string());
            continue;
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::format("tensor line without a name"))?;
        let shape = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::format(format!("bad dimension {p:?} for {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let end = offset
            .checked_add(n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::format(format!("payload truncated inside {name}")))?;
        tensors.push(Tensor::new(name, shape, payload[offset..end].to_vec()));
        offset = end;
    }
    if offset != payload.len() {
        return Err(Error::format(format!(
            "payload has {} trailing values",
            payload.len() - offset
        )));
    }
    Ok((other, tensors))
}
