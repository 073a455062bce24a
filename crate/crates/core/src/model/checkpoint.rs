//! Checkpoint container: a JSON manifest followed by one little-endian blob.
//!
//! ```text
//! magic     8 bytes   "TNNCKPT\0"
//! version   u32 LE
//! manifest  u64 LE length, then UTF-8 JSON
//! blob      u64 LE length, then raw f64 LE tensor data
//! ```
//!
//! The manifest's tensor index lists every parameter in canonical order with
//! its byte offset into the blob; offsets tile the blob with no gaps.

use std::path::Path;

use super::{ModelConfig, TnnModel};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::params::Parameters;

pub const MAGIC: &[u8; 8] = b"TNNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub bytes: usize,
}

/// Run information stored next to the weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub train_seq_len: usize,
    pub vocab: Vocab,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TnnModel,
    pub meta: CheckpointMeta,
}

pub fn encode(model: &TnnModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    model.visit("", &mut |name, shape, data| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: "f64".into(),
            offset: blob.len(),
            bytes: data.len() * 8,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(blob.len() + json.len() + 28);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], len: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < len {
        return Err(Error::Corrupt(format!(
            "truncated {what}: need {len} bytes, {} remain",
            bytes.len()
        )));
    }
    let (head, tail) = bytes.split_at(len);
    *bytes = tail;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<usize> {
    let raw = take(bytes, 8, what)?;
    Ok(u64::from_le_bytes(raw.try_into().unwrap()) as usize)
}

pub fn decode(mut bytes: &[u8]) -> Result<Checkpoint> {
    let cursor = &mut bytes;
    if take(cursor, 8, "magic")? != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(cursor, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest_len = take_u64(cursor, "manifest length")?;
    let manifest: Manifest = serde_json::from_slice(take(cursor, manifest_len, "manifest")?)
        .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let blob_len = take_u64(cursor, "blob length")?;
    let blob = take(cursor, blob_len, "blob")?;
    if !cursor.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes after blob", cursor.len())));
    }

    let mut expected_offset = 0;
    for t in &manifest.tensors {
        if t.dtype != "f64" {
            return Err(Error::Corrupt(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
        }
        if t.offset != expected_offset || t.bytes != t.shape.iter().product::<usize>() * 8 {
            return Err(Error::Corrupt(format!("tensor {} does not tile the blob", t.name)));
        }
        expected_offset += t.bytes;
    }
    if expected_offset != blob.len() {
        return Err(Error::Corrupt(format!(
            "tensor index covers {expected_offset} bytes, blob has {}",
            blob.len()
        )));
    }

    // Build a model of the recorded shape, then overwrite every tensor.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = TnnModel::new(manifest.model.clone(), &mut rng)?;
    let mut index = manifest.tensors.iter();
    let mut failure = None;
    model.visit_mut("", &mut |name, shape, data| {
        if failure.is_some() {
            return;
        }
        match index.next() {
            Some(t) if t.name == name && t.shape == shape => {
                for (v, chunk) in data.iter_mut().zip(blob[t.offset..t.offset + t.bytes].chunks_exact(8)) {
                    *v = f64::from_le_bytes(chunk.try_into().unwrap());
                }
            }
            Some(t) => {
                failure = Some(Error::dim(format!(
                    "tensor {} {:?} does not match model tensor {name} {shape:?}",
                    t.name, t.shape
                )))
            }
            None => failure = Some(Error::dim(format!("tensor {name} missing from checkpoint"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if index.next().is_some() {
        return Err(Error::dim("checkpoint has more tensors than the model"));
    }
    if let Some(bad) = model.blocks.iter().find(|b| !(0.0..=1.0).contains(&b.gtu.tno.decay())) {
        return Err(Error::Corrupt(format!("decay {} outside [0, 1]", bad.gtu.tno.decay())));
    }
    model.project();
    Ok(Checkpoint {
        model,
        meta: manifest.meta,
    })
}

pub fn save_checkpoint(model: &TnnModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
