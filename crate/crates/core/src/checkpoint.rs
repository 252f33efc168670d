//! Checkpoint container: a text manifest listing every parameter with its
//! partition tag, shape and byte span, followed by a little-endian 32-bit
//! float payload. Reading back a written file is bitwise identity.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{Model, ModelConfig, Param, ParamSet, PartitionTag};
use crate::ndtensor::Tensor;

const HEADER: &str = "trfeddis-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad header line {0:?}")]
    BadHeader(String),
    #[error("checkpoint version mismatch: found {found:?}, expected v1")]
    VersionMismatch { found: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("payload truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("manifest/payload inconsistency: {0}")]
    Inconsistent(String),
    #[error("model mismatch: {0}")]
    Model(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize a parameter set. Parameter names must not contain whitespace.
pub fn write_params(params: &ParamSet<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut manifest = String::new();
    manifest.push_str(HEADER);
    manifest.push('\n');
    manifest.push_str(&format!("params {}\n", params.len()));
    let mut offset = 0usize;
    for p in params.iter() {
        debug_assert!(!p.name.contains(char::is_whitespace));
        let nbytes = p.value.numel() * 4;
        let dims: Vec<String> = p.value.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "param {} {} {} {} {} {}\n",
            p.name,
            p.tag,
            u8::from(p.trainable),
            dims.join(","),
            offset,
            nbytes
        ));
        offset += nbytes;
    }
    manifest.push_str(&format!("payload {offset}\n"));

    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(manifest.as_bytes()).map_err(io_err(path))?;
    let mut payload = Vec::with_capacity(offset);
    for p in params.iter() {
        for v in &p.value.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&payload).map_err(io_err(path))?;
    Ok(())
}

/// Parse a checkpoint back into a parameter set.
pub fn read_params(path: &Path) -> Result<ParamSet<f32>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    parse_params(&bytes)
}

fn parse_params(bytes: &[u8]) -> Result<ParamSet<f32>, CheckpointError> {
    // manifest is ASCII lines up to and including the "payload N" line
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<String, CheckpointError> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(CheckpointError::Manifest("unterminated manifest".into()));
        }
        let line = String::from_utf8(bytes[start..*pos].to_vec())
            .map_err(|_| CheckpointError::Manifest("non-utf8 manifest line".into()))?;
        *pos += 1;
        Ok(line)
    };

    let header = next_line(&mut pos)?;
    if header != HEADER {
        if let Some(rest) = header.strip_prefix("trfeddis-checkpoint ") {
            return Err(CheckpointError::VersionMismatch {
                found: rest.to_string(),
            });
        }
        return Err(CheckpointError::BadHeader(header));
    }
    let count_line = next_line(&mut pos)?;
    let count: usize = count_line
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::Manifest(format!("bad params line {count_line:?}")))?;

    struct Entry {
        name: String,
        tag: PartitionTag,
        trainable: bool,
        shape: Vec<usize>,
        offset: usize,
        nbytes: usize,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&mut pos)?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 7 || fields[0] != "param" {
            return Err(CheckpointError::Manifest(format!("bad param line {line:?}")));
        }
        let tag = PartitionTag::parse(fields[2])
            .ok_or_else(|| CheckpointError::Manifest(format!("unknown tag {}", fields[2])))?;
        let trainable = match fields[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(CheckpointError::Manifest(format!(
                    "bad trainable flag {other}"
                )))
            }
        };
        let shape: Vec<usize> = fields[4]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::Manifest(format!("bad shape {}", fields[4])))?;
        let offset: usize = fields[5]
            .parse()
            .map_err(|_| CheckpointError::Manifest(format!("bad offset {}", fields[5])))?;
        let nbytes: usize = fields[6]
            .parse()
            .map_err(|_| CheckpointError::Manifest(format!("bad length {}", fields[6])))?;
        entries.push(Entry {
            name: fields[1].to_string(),
            tag,
            trainable,
            shape,
            offset,
            nbytes,
        });
    }
    let payload_line = next_line(&mut pos)?;
    let payload_len: usize = payload_line
        .strip_prefix("payload ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CheckpointError::Manifest(format!("bad payload line {payload_line:?}")))?;

    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(CheckpointError::Truncated {
            expected: payload_len,
            actual: payload.len(),
        });
    }
    // entries must tile the payload exactly, in order
    let mut expect_offset = 0usize;
    for e in &entries {
        if e.offset != expect_offset {
            return Err(CheckpointError::Inconsistent(format!(
                "parameter {} at offset {}, expected {}",
                e.name, e.offset, expect_offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        if numel * 4 != e.nbytes {
            return Err(CheckpointError::Inconsistent(format!(
                "parameter {}: shape {:?} is {} bytes, manifest says {}",
                e.name,
                e.shape,
                numel * 4,
                e.nbytes
            )));
        }
        expect_offset += e.nbytes;
    }
    if expect_offset != payload_len {
        return Err(CheckpointError::Inconsistent(format!(
            "entries cover {expect_offset} bytes, payload has {payload_len}"
        )));
    }

    let mut params = Vec::with_capacity(count);
    for e in entries {
        let data: Vec<f32> = payload[e.offset..e.offset + e.nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Param {
            name: e.name,
            tag: e.tag,
            trainable: e.trainable,
            value: Tensor {
                shape: e.shape,
                data,
            },
        });
    }
    Ok(ParamSet { params })
}

/// Write a model's full parameter set.
pub fn checkpoint_write(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    write_params(&model.params, path)
}

/// Read a checkpoint and rebuild a model against the given architecture.
pub fn checkpoint_read(config: ModelConfig, path: &Path) -> Result<Model<f32>, CheckpointError> {
    let params = read_params(path)?;
    Model::from_parts(config, params).map_err(|e| CheckpointError::Model(e.to_string()))
}
