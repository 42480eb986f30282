//! `.sdck` generator checkpoints and the import manifest for external
//! tensor dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"STYLEDCK"                 8 bytes
//! header_len: u64             8 bytes
//! header: JSON                header_len bytes
//! payload: f32                tensors back to back, in header order
//! sha256                      32 bytes over everything above
//! ```
//!
//! The header carries the format version, the canonical descriptor, the
//! weights metadata (source, lineage) and a tensor table of
//! `(name, shape, offset)` with offsets counted in floats. `w_avg` is stored
//! as the last tensor.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{build_architecture, ArchConfig, ArchitectureDescriptor, GeneratorWeights, WeightsMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STYLEDCK";
pub const FORMAT_VERSION: u32 = 1;
const W_AVG: &str = "w_avg";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    descriptor: ArchitectureDescriptor,
    meta: WeightsMeta,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(weights: &GeneratorWeights) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut offset = 0;
    let named: Vec<(String, &Tensor)> = weights
        .named()
        .map(|(s, t)| (s.name, t))
        .chain(std::iter::once((W_AVG.to_string(), weights.w_avg())))
        .collect();
    for (name, t) in &named {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        descriptor: weights.descriptor().clone(),
        meta: weights.meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * offset + 32);
    out.extend_from_slice(MAGIC);
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(header);
    for (_, t) in &named {
        for &v in t.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend(digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<GeneratorWeights> {
    if bytes.len() < 16 + 32 {
        return Err(Error::Checksum("checkpoint".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Checksum("checkpoint".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Format("not a styledomain checkpoint".into()));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&body[16..header_end])?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let header: Header = serde_json::from_value(value)?;
    let payload = &body[header_end..];
    if payload.len() % 4 != 0 {
        return Err(Error::Format("payload is not a whole number of f32 values".into()));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut by_name: HashMap<String, Tensor> = HashMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Format(format!("tensor {} exceeds payload", e.name)))?;
        by_name.insert(e.name.clone(), Tensor::new(e.shape.clone(), data.to_vec())?);
    }
    let w_avg = by_name
        .remove(W_AVG)
        .ok_or_else(|| Error::Format("checkpoint lacks w_avg".into()))?;
    let tensors = header
        .descriptor
        .weight_slots()
        .iter()
        .map(|s| {
            by_name
                .remove(&s.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {}", s.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    GeneratorWeights::from_tensors(header.descriptor, tensors, Some(w_avg), header.meta)
}

pub fn save(weights: &GeneratorWeights, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(weights)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<GeneratorWeights> {
    from_bytes(&std::fs::read(path)?)
}

/// Maps tensors of an external checkpoint dump onto generator slots.
///
/// Every slot must be produced exactly once and every source tensor must be
/// either mapped or listed in `ignore`; anything else fails the import.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionManifest {
    pub architecture: ArchConfig,
    pub source: String,
    /// External tensor name → slot name.
    pub tensors: BTreeMap<String, String>,
    #[serde(default)]
    pub ignore: Vec<String>,
    /// External name of the truncation center, if the dump has one.
    #[serde(default)]
    pub w_avg: Option<String>,
}

/// Tensor dump format accepted by [`import`]: `{name: {shape, data}}` JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn import(manifest: &ConversionManifest, mut dump: BTreeMap<String, DumpTensor>) -> Result<GeneratorWeights> {
    let desc: ArchitectureDescriptor = build_architecture(&manifest.architecture)?;
    let slots = desc.weight_slots();
    let mut produced: HashMap<&str, Tensor> = HashMap::new();
    for (external, slot_name) in &manifest.tensors {
        let slot = slots
            .iter()
            .find(|s| &s.name == slot_name)
            .ok_or_else(|| Error::Format(format!("manifest maps {external} to unknown slot {slot_name}")))?;
        let t = dump
            .remove(external)
            .ok_or_else(|| Error::Format(format!("dump lacks tensor {external}")))?;
        let tensor = Tensor::new(t.shape, t.data)?;
        if tensor.numel() != slot.numel() {
            return Err(Error::Shape(format!(
                "{external} has {:?}, slot {slot_name} needs {:?}",
                tensor.shape(),
                slot.shape
            )));
        }
        let tensor = tensor.reshape(&slot.shape)?;
        if produced.insert(slot.name.as_str(), tensor).is_some() {
            return Err(Error::Format(format!("slot {slot_name} mapped twice")));
        }
    }
    let w_avg = match &manifest.w_avg {
        Some(name) => {
            let t = dump
                .remove(name)
                .ok_or_else(|| Error::Format(format!("dump lacks tensor {name}")))?;
            Some(Tensor::new(t.shape, t.data)?.reshape(&[desc.latent_dim])?)
        }
        None => None,
    };
    for name in &manifest.ignore {
        dump.remove(name);
    }
    if let Some(left) = dump.keys().next() {
        return Err(Error::Format(format!("unmapped source tensor {left}")));
    }
    let tensors = slots
        .iter()
        .map(|s| {
            produced
                .remove(s.name.as_str())
                .ok_or_else(|| Error::Format(format!("no source tensor for slot {}", s.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    GeneratorWeights::from_tensors(
        desc,
        tensors,
        w_avg,
        WeightsMeta {
            source: manifest.source.clone(),
            lineage: Vec::new(),
        },
    )
}
