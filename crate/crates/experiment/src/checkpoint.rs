//! Binary checkpoints: magic, little-endian header length, JSON header, then
//! every parameter as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use weakinv_core::tape::Mat;
use weakinv_core::vae::{ModelConfig, ParamGroup, ParamStore, Vae};

use crate::config::RunConfig;
use crate::error::{ExpError, Result};

pub const MAGIC: &[u8; 8] = b"WKINVCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    /// Offset in values (not bytes) from the start of the data block.
    pub offset: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub run: Option<RunConfig>,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
    pub data_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Vae,
}

fn bytes_of(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(model: &Vae, run: Option<&RunConfig>, step: usize) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for e in model.params().entries() {
        let values: Vec<f64> = e.value.iter().copied().collect();
        let bytes = bytes_of(&values);
        tensors.push(TensorEntry {
            name: e.name.clone(),
            group: e.group,
            rows: e.value.nrows(),
            cols: e.value.ncols(),
            offset,
            sha256: digest(&bytes),
        });
        offset += values.len();
        data.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        run: run.cloned(),
        step,
        tensors,
        data_sha256: digest(&data),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| ExpError::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a weakinv checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(ExpError::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    let data = &body[len..];
    if digest(data) != header.data_sha256 {
        return Err(bad("data hash mismatch"));
    }
    let mut store = ParamStore::default();
    for t in &header.tensors {
        let start = t.offset * 8;
        let end = start + t.rows * t.cols * 8;
        if end > data.len() {
            return Err(ExpError::Checkpoint(format!("tensor {} runs past the data block", t.name)));
        }
        let chunk = &data[start..end];
        if digest(chunk) != t.sha256 {
            return Err(ExpError::Checkpoint(format!("hash mismatch for tensor {}", t.name)));
        }
        let values: Vec<f64> =
            chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let value = Mat::from_shape_vec((t.rows, t.cols), values).expect("checked length");
        store.add(t.name.clone(), t.group, value);
    }
    let model = Vae::from_params(header.model.clone(), store)?;
    Ok(Checkpoint { header, model })
}

/// Writes through a temporary file so a crash never leaves a half-written checkpoint.
pub fn save(path: &Path, model: &Vae, run: Option<&RunConfig>, step: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode(model, run, step)?)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(ExpError::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    decode(&fs::read(path)?)
}
