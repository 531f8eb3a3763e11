//! `DVCP` v1, a named-parameter archive for [`DualVit`] models.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `DVCP` |
//! | 4 | u32 version, 1 |
//! | 4 | u32 manifest length L |
//! | L | manifest: UTF-8 JSON `{"config": …, "variant": "a".."d"}` |
//! | 4 | u32 entry count |
//! | … | entries |
//! | 32 | SHA-256 of every preceding byte |
//!
//! Each entry is a u16 name length, the UTF-8 name, a u8 rank, `rank` u32
//! dimensions and the f32 payload in row-major order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use dualvit_core::{AblationVariant, DualVit, ModelConfig, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bytes::{FormatError, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVCP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Echo of the model definition, stored as JSON inside the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    pub variant: AblationVariant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub entries: Vec<Entry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_model(model: &DualVit<f32>) -> Self {
        let entries =
            model.params.iter().map(|(_, p)| Entry { name: p.name.clone(), value: p.value.clone() }).collect();
        Self { manifest: Manifest { config: model.config.clone(), variant: model.variant }, entries }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| Error::Encode(e.to_string()))?;
        let too_big = |what: &str| Error::Encode(format!("{what} does not fit its length field"));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(manifest.len()).map_err(|_| too_big("manifest"))?.to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| too_big("entry count"))?.to_le_bytes());
        for entry in &self.entries {
            let name = entry.name.as_bytes();
            out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_big(&entry.name))?.to_le_bytes());
            out.extend_from_slice(name);
            let shape = entry.value.shape();
            out.push(u8::try_from(shape.len()).map_err(|_| too_big(&entry.name))?);
            for &d in shape {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big(&entry.name))?.to_le_bytes());
            }
            for v in entry.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and verifies an archive. The checksum is checked before any
    /// field after the header is trusted.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(FormatError::Truncated {
                offset: 8,
                what: "archive",
                expected: DIGEST_LEN,
                actual: bytes.len() - 8,
            }
            .into());
        }
        let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(FormatError::Checksum { stored: hex(stored), computed: hex(&computed) }.into());
        }

        let mut r = Reader::new(body);
        r.take(8, "header")?;
        let len = r.u32("manifest length")? as usize;
        let at = r.offset();
        let raw = r.take(len, "manifest")?;
        let manifest: Manifest =
            serde_json::from_slice(raw).map_err(|e| r.invalid(at, format!("bad manifest: {e}")))?;

        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = r.offset();
            let name_len = r.u16("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "entry name")?)
                .map_err(|_| r.invalid(at, "entry name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(r.invalid(at, format!("duplicate entry `{name}`")).into());
            }
            let rank = r.u8("entry rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("entry dimension")? as usize);
            }
            let payload = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.invalid(at, format!("entry `{name}` shape {shape:?} overflows")))?;
            let data = r
                .take(payload, "entry payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let value = Tensor::new(shape, data)?;
            entries.push(Entry { name, value });
        }
        if r.remaining() != 0 {
            return Err(r
                .invalid(r.offset(), format!("{} unexpected bytes before the checksum", r.remaining()))
                .into());
        }
        Ok(Self { manifest, entries })
    }

    /// Copies the stored parameters into `model`.
    ///
    /// The configs must agree on everything except `seed`, which only steers
    /// initialization. Entries are then matched by name; the first one that is
    /// unknown to the model or has the wrong shape is reported, followed by any
    /// model parameter the archive lacks.
    pub fn load_into(&self, model: &mut DualVit<f32>) -> Result<()> {
        let mut stored = serde_json::to_value(&self.manifest).map_err(|e| Error::Encode(e.to_string()))?;
        let mut target = serde_json::to_value(Manifest { config: model.config.clone(), variant: model.variant })
            .map_err(|e| Error::Encode(e.to_string()))?;
        for v in [&mut stored, &mut target] {
            v["config"]["seed"] = Value::Null;
        }
        if let Some((field, expected, found)) = first_difference(&target, &stored, String::new()) {
            return Err(Error::ConfigMismatch { field, expected, found });
        }

        let mut loaded = HashSet::new();
        for entry in &self.entries {
            let Some(id) = model.params.find(&entry.name) else {
                return Err(Error::Entry {
                    name: entry.name.clone(),
                    problem: "no such parameter in the target model".into(),
                });
            };
            let slot = model.params.value_mut(id);
            if slot.shape() != entry.value.shape() {
                return Err(Error::Entry {
                    name: entry.name.clone(),
                    problem: format!("shape {:?} does not match the model's {:?}", entry.value.shape(), slot.shape()),
                });
            }
            *slot = entry.value.clone();
            loaded.insert(entry.name.as_str());
        }
        if let Some((_, missing)) = model.params.iter().find(|(_, p)| !loaded.contains(p.name.as_str())) {
            return Err(Error::Entry { name: missing.name.clone(), problem: "missing from the checkpoint".into() });
        }
        Ok(())
    }

    /// Builds the model described by the manifest and fills in its parameters.
    pub fn into_model(self) -> Result<DualVit<f32>> {
        let mut model = DualVit::build_variant(&self.manifest.config, self.manifest.variant)?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}

/// Path and both sides of the first leaf where two JSON trees disagree.
fn first_difference(expected: &Value, found: &Value, path: String) -> Option<(String, String, String)> {
    let join = |key: &str| if path.is_empty() { key.to_string() } else { format!("{path}.{key}") };
    match (expected, found) {
        (Value::Object(a), Value::Object(b)) => {
            for (key, va) in a {
                let vb = b.get(key).unwrap_or(&Value::Null);
                if let Some(d) = first_difference(va, vb, join(key)) {
                    return Some(d);
                }
            }
            None
        }
        (Value::Array(a), Value::Array(b)) if a.len() == b.len() => {
            a.iter().zip(b).enumerate().find_map(|(i, (va, vb))| first_difference(va, vb, join(&i.to_string())))
        }
        _ if expected == found => None,
        _ => Some((path, expected.to_string(), found.to_string())),
    }
}

pub fn save(model: &DualVit<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = Checkpoint::from_model(model).encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<DualVit<f32>> {
    read(path)?.into_model()
}
