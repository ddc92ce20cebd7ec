//! Checkpoint container.
//!
//! Layout: magic `HOIC`, format version (`u32` LE), header length (`u64` LE),
//! a JSON header, then every tensor of [`ModelParams::tensors`] in order as
//! little-endian `f64`. The header holds the head config, the verb list, the
//! category names, tensor names and shapes, and free-form `extra` metadata
//! (training config, iteration, seed).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadConfig, Model, ModelParams};
use crate::dataset::VerbDef;
use crate::error::ModelError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HOIC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub actions: Vec<VerbDef>,
    pub categories: Vec<String>,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: HeadConfig,
    actions: Vec<VerbDef>,
    categories: Vec<String>,
    tensors: Vec<TensorInfo>,
    extra: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let tensors = ckpt.model.params.tensors();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.model.config.clone(),
        actions: ckpt.actions.clone(),
        categories: ckpt.categories.clone(),
        tensors: tensors
            .iter()
            .map(|(n, s, _)| TensorInfo {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
        extra: ckpt.extra.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(8 * ckpt.model.params.num_parameters());
    for (_, _, t) in &tensors {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, expected HOIC".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    let mut params = ModelParams::zeros(&header.config);
    {
        let slots = params.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad(format!(
                "header lists {} tensors, config implies {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for ((name, shape, dst), info) in slots.into_iter().zip(&header.tensors) {
            if name != info.name || shape != info.shape {
                return Err(bad(format!(
                    "tensor {} {:?} does not match config ({} {:?})",
                    info.name, info.shape, name, shape
                )));
            }
            let mut bytes = vec![0u8; 8 * dst.len()];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(format!("payload truncated in tensor {name}")))?;
            for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
                *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes after payload", rest.len())));
    }
    Ok(Checkpoint {
        model: Model::from_parts(header.config, params)?,
        actions: header.actions,
        categories: header.categories,
        extra: header.extra,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
