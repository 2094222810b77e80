//! Self-describing checkpoint files.
//!
//! Layout: one JSON header line (format tag, version, spec hash, the spec
//! itself, parameter names and shapes), then every parameter as float32
//! little-endian in declaration order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const FORMAT: &str = "radiomap-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub spec_hash: String,
    pub spec: ModelSpec,
    pub params: Vec<ParamEntry>,
}

fn param_entries(spec: &ModelSpec) -> Vec<ParamEntry> {
    spec.nodes
        .iter()
        .zip(spec.param_shapes())
        .filter_map(|(n, s)| s.map(|(w, b)| (n, w, b)))
        .flat_map(|(n, w, b)| {
            [
                ParamEntry {
                    name: format!("{}.weight", n.name),
                    shape: w,
                },
                ParamEntry {
                    name: format!("{}.bias", n.name),
                    shape: b,
                },
            ]
        })
        .collect()
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let spec = model.spec();
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        spec_hash: spec.hash(),
        spec: spec.clone(),
        params: param_entries(spec),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for p in model.params() {
        for v in p.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Model> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.is_empty() {
        return Err(NnError::Format("empty checkpoint".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| NnError::Format(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(NnError::Format(format!("unexpected format tag `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(NnError::Format(format!("unsupported version {}", header.version)));
    }
    header.spec.validate()?;
    if header.spec.hash() != header.spec_hash {
        return Err(NnError::Format("spec hash does not match the embedded spec".into()));
    }
    let expected = param_entries(&header.spec);
    if expected.len() != header.params.len()
        || expected.iter().zip(&header.params).any(|(a, b)| a.shape != b.shape)
    {
        return Err(NnError::Format("parameter table disagrees with the spec".into()));
    }
    let mut params = Vec::with_capacity(expected.len());
    for e in &expected {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        input
            .read_exact(&mut bytes)
            .map_err(|_| NnError::Format(format!("truncated payload at `{}`", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Tensor::new(e.shape.clone(), data)?);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(NnError::Format("trailing bytes after payload".into()));
    }
    Model::from_params(header.spec, params)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
