//! Binary model checkpoints.
//!
//! Layout: 8-byte magic `SEGMILCK`, a little-endian `u64` header length, a
//! JSON header (model config, dims, tensor table), then the tensors as
//! little-endian `f64` in table order. Offsets are in bytes from the start
//! of the tensor blob.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::milmodel::{ModelConfig, ModelDims, ModelParams};

const MAGIC: &[u8; 8] = b"SEGMILCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    dims: ModelDims,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint_to<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    params.validate()?;
    let named = params.tensors.named();
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.to_string(),
                shape: t.shape.clone(),
                offset,
            };
            offset += 8 * t.data.len() as u64;
            e
        })
        .collect();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        dims: params.dims,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let io = |e| Error::io("<checkpoint>", e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    for t in &named {
        for v in t.data {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_checkpoint_from<R: Read>(mut input: R) -> Result<ModelParams> {
    let short = |what: &str| Error::Format(format!("checkpoint truncated in {what}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| short("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| short("header length"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json).map_err(|_| short("header"))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }

    // Shapes come from the declared config; the table must agree with them.
    let mut params = ModelParams::init(header.dims, header.config.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>, usize)> = params
        .tensors
        .named()
        .iter()
        .map(|t| (t.name.to_string(), t.shape.clone(), t.data.len()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Format("checkpoint tensor table does not match config".into()));
    }
    let mut offset = 0u64;
    for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape || entry.offset != offset {
            return Err(Error::Format(format!(
                "checkpoint tensor {} {:?} @{} disagrees with expected {name} {shape:?} @{offset}",
                entry.name, entry.shape, entry.offset
            )));
        }
        offset += 8 * shape.iter().product::<usize>() as u64;
    }
    let mut buf = [0u8; 8];
    for slice in params.tensors.slices_mut() {
        for v in slice.iter_mut() {
            input.read_exact(&mut buf).map_err(|_| short("tensor data"))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut rest = Vec::new();
    input
        .read_to_end(&mut rest)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
    }
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint_to(params, BufWriter::new(file)).map_err(|e| with_path(e, path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_from(BufReader::new(file)).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}
