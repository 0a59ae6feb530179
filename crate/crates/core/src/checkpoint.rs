//! `.lckpt` checkpoints.
//!
//! Layout: the 8-byte magic `LNTCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every parameter tensor as little-endian `f64` at the offsets listed in
//! the manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Shape;
use crate::error::{LanternError, Result};
use crate::net::{LanternParams, ParamLayout};
use crate::train::{TrainConfig, TrainReport};

pub const CHECKPOINT_EXT: &str = "lckpt";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LNTCKPT\0";

/// Parameters plus the context they were trained in.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: LanternParams,
    pub config: Option<TrainConfig>,
    pub report: Option<TrainReport>,
    /// Volume size the parameters were trained on.
    pub shape: Option<Shape>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    dims: Option<[usize; 3]>,
    stages: usize,
    substages: usize,
    filters: usize,
    control_points: usize,
    config: Option<TrainConfig>,
    report: Option<TrainReport>,
    layout: ParamLayout,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)?).map_err(|e| LanternError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| LanternError::io(path, e))?;
    decode(&bytes, path)
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.params;
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    p.for_each_tensor(|name, shape, values, _| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: payload.len(),
            len: values.len(),
        });
        payload.extend_from_slice(values);
    });
    let first = &p.stages[0].substages[0];
    let manifest = Manifest {
        dims: ckpt.shape.map(|s| [s.nx, s.ny, s.nt]),
        stages: p.stages.len(),
        substages: p.stages[0].substages.len(),
        filters: first.conv1.len(),
        control_points: first.plf.len(),
        config: ckpt.config.clone(),
        report: ckpt.report.clone(),
        layout: p.layout(),
        tensors,
        payload_len: payload.len(),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| LanternError::InvalidParameter(format!("cannot encode manifest: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| LanternError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(LanternError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if mlen > body.len() {
        return Err(corrupt(format!("manifest of {mlen} bytes does not fit")));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    let raw = &body[mlen..];
    if raw.len() != 8 * manifest.payload_len {
        return Err(corrupt(format!(
            "payload has {} bytes, manifest promises {}",
            raw.len(),
            8 * manifest.payload_len
        )));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut params = LanternParams::from_layout(&manifest.layout)?;
    let mut entries = manifest.tensors.iter();
    let mut problem: Option<String> = None;
    params
        .for_each_tensor_mut(|name, _, values, _| {
            if problem.is_some() {
                return;
            }
            match entries.next() {
                Some(e) if e.name == name && e.len == values.len() && e.offset + e.len <= payload.len() => {
                    values.copy_from_slice(&payload[e.offset..e.offset + e.len]);
                }
                Some(e) => problem = Some(format!("tensor {} does not match layout entry {name}", e.name)),
                None => problem = Some(format!("missing tensor {name}")),
            }
        })
        .map_err(|e| corrupt(format!("invalid parameter values: {e}")))?;
    if let Some(p) = problem {
        return Err(corrupt(p));
    }
    if entries.next().is_some() {
        return Err(corrupt("extra tensors in manifest".into()));
    }
    Ok(Checkpoint {
        params,
        config: manifest.config,
        report: manifest.report,
        shape: manifest.dims.map(|[a, b, c]| Shape::new(a, b, c)),
    })
}
