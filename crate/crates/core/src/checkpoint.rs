//! Binary checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header
//! `{"format", "meta", "tensors": [{"name", "shape", "offset"}]}`, then the
//! tensors as one contiguous little-endian `f64` payload. `offset` counts
//! values (not bytes) from the start of the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::RunningStats;
use crate::encoders::{EncoderStack, StackDims};
use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::tensor::Tensor;

pub const FORMAT: &str = "cebmv-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Stack-level metadata stored in the header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackMeta {
    pub variant: Variant,
    pub dims: StackDims,
    pub config_hash: String,
    pub steps: u64,
}

/// Serializes named tensors with arbitrary JSON metadata.
pub fn encode(meta: serde_json::Value, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += t.numel();
    }
    let header = Header { format: FORMAT.into(), meta, tensors: entries };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let mut out = Vec::with_capacity(8 + json.len() + offset * 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::json("checkpoint header", e))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", header.format)));
    }
    let payload = &body[hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut expected = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n > values.len() {
            return Err(Error::Checkpoint(format!("tensor {} has an inconsistent offset", e.name)));
        }
        let t = Tensor::new(e.shape, values[e.offset..e.offset + n].to_vec())?;
        expected += n;
        out.push((e.name, t));
    }
    if expected != values.len() {
        return Err(bad("payload has trailing values"));
    }
    Ok((header.meta, out))
}

fn stats_tensors(prefix: &str, names: &[String], stats: &[RunningStats], out: &mut Vec<(String, Tensor)>) {
    for (name, s) in names.iter().zip(stats) {
        out.push((format!("{prefix}/{name}.mean"), Tensor::from_parts(vec![s.mean.len()], s.mean.clone())));
        out.push((format!("{prefix}/{name}.var"), Tensor::from_parts(vec![s.var.len()], s.var.clone())));
    }
}

/// Serializes every online and target parameter plus running statistics.
pub fn stack_to_bytes(stack: &EncoderStack, meta: &StackMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    for (n, t) in stack.online().names().iter().zip(stack.online().values()) {
        tensors.push((format!("online/{n}"), t.clone()));
    }
    for (n, t) in stack.target().names().iter().zip(stack.target().values()) {
        tensors.push((format!("target/{n}"), t.clone()));
    }
    let k = stack.target_running_stats().len();
    stats_tensors("stats", stack.stat_names(), stack.running_stats(), &mut tensors);
    stats_tensors("target_stats", &stack.stat_names()[..k], stack.target_running_stats(), &mut tensors);
    let meta = serde_json::to_value(meta).map_err(|e| Error::json("checkpoint meta", e))?;
    encode(meta, &tensors)
}

pub fn stack_from_bytes(bytes: &[u8]) -> Result<(EncoderStack, StackMeta)> {
    let (meta, tensors) = decode(bytes)?;
    let meta: StackMeta = serde_json::from_value(meta).map_err(|e| Error::json("checkpoint meta", e))?;
    let mut online = Vec::new();
    let mut target = Vec::new();
    let mut stats: Vec<(String, RunningStats)> = Vec::new();
    let mut target_stats: Vec<(String, RunningStats)> = Vec::new();
    for (name, t) in tensors {
        let (group, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor name {name}")))?;
        match group {
            "online" => online.push((rest.to_string(), t)),
            "target" => target.push((rest.to_string(), t)),
            "stats" | "target_stats" => {
                let dst = if group == "stats" { &mut stats } else { &mut target_stats };
                if let Some(layer) = rest.strip_suffix(".mean") {
                    dst.push((layer.to_string(), RunningStats { mean: t.into_data(), var: Vec::new() }));
                } else if let Some(layer) = rest.strip_suffix(".var") {
                    match dst.last_mut() {
                        Some((l, s)) if l == layer && s.var.is_empty() => s.var = t.into_data(),
                        _ => return Err(Error::Checkpoint(format!("orphan variance {name}"))),
                    }
                } else {
                    return Err(Error::Checkpoint(format!("unexpected tensor name {name}")));
                }
            }
            _ => return Err(Error::Checkpoint(format!("unexpected tensor group {group}"))),
        }
    }
    let stack = EncoderStack::from_parts(meta.dims.clone(), meta.variant, online, target, stats, target_stats)?;
    Ok((stack, meta))
}

pub fn save_stack(path: &Path, stack: &EncoderStack, meta: &StackMeta) -> Result<()> {
    let bytes = stack_to_bytes(stack, meta)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_stack(path: &Path) -> Result<(EncoderStack, StackMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    stack_from_bytes(&bytes)
}
