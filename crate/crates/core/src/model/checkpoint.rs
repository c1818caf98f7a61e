//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "LADCKPT\0"
//! version      u32      1
//! header_len   u64      length of the JSON header in bytes
//! header       JSON     { tag, config, init_seed, tensors: [..], initial: [..] }
//! payload      f64 LE   values of every entry in `tensors`, then every entry
//!                       in `initial`, each in row-major order
//! ```
//!
//! `tensors` entries carry `name`, `group`, `shape` and `trainable`;
//! `initial` entries carry `name` and `shape` of the initialisation snapshot.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, LayeredModel};
use crate::error::{Error, Result};
use crate::nn::{Group, Param, ParameterSet, WeightSnapshot};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LADCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct InitialEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tag: String,
    config: EncoderConfig,
    init_seed: u64,
    tensors: Vec<TensorEntry>,
    initial: Vec<InitialEntry>,
}

/// A model restored from disk together with the tag it was saved under.
pub struct Checkpoint {
    pub tag: String,
    pub model: LayeredModel,
}

pub fn write_checkpoint(model: &LayeredModel, tag: &str, path: &Path) -> Result<()> {
    let initial = model.initial_snapshot();
    let header = Header {
        tag: tag.to_string(),
        config: model.config().clone(),
        init_seed: initial.init_seed,
        tensors: model
            .params
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        initial: initial
            .tensors
            .iter()
            .map(|(n, t)| InitialEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

    let mut buf = Vec::with_capacity(json.len() + 8 * (model.params.num_scalars() * 2 + 4));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let values = model
        .params
        .params()
        .iter()
        .map(|p| &p.value)
        .chain(initial.tensors.iter().map(|(_, t)| t));
    for t in values {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));

    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&e.to_string()))?;

    let mut cursor = header_end;
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let end = cursor + n * 8;
        if end > bytes.len() {
            return Err(bad("truncated payload"));
        }
        let data = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        Tensor::new(shape.to_vec(), data)
    };

    let mut params = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        params.push(Param {
            name: e.name.clone(),
            group: e.group,
            value: take(&e.shape)?,
            trainable: e.trainable,
        });
    }
    let mut initial = WeightSnapshot {
        init_seed: header.init_seed,
        tensors: Vec::with_capacity(header.initial.len()),
    };
    for e in &header.initial {
        initial.tensors.push((e.name.clone(), take(&e.shape)?));
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    let params = ParameterSet::from_params(params)?;
    Ok(Checkpoint {
        tag: header.tag,
        model: LayeredModel::from_parts(header.config, params, initial)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 10,
            max_sequence_length: 4,
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 8,
            num_classes: 3,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = LayeredModel::new(tiny()).unwrap();
        m.params.value_mut(ParamId(3)).data_mut()[0] = -0.0;
        m.params.freeze_group(Group::Probe(1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&m, "warmup", &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.tag, "warmup");
        assert_eq!(back.model.config(), m.config());
        assert_eq!(back.model.initial_snapshot(), m.initial_snapshot());
        for ((_, a), (_, b)) in m.params.iter().zip(back.model.params.iter()) {
            assert!(a.value.bitwise_eq(&b.value));
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.group, b.group);
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let m = LayeredModel::new(tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&m, "x", &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_checkpoint(&path).is_err());
        fs::write(&path, b"garbage").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
