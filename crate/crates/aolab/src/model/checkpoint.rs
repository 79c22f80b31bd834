//! Versioned checkpoint container.
//!
//! Layout: the magic string `AOLAB1\n`, a little-endian u64 header length,
//! a TOML header (arbitrary metadata plus an `arrays` directory of names and
//! shapes), then the raw little-endian f64 array payloads concatenated in
//! directory order. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelMode, Weights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 7] = b"AOLAB1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    /// Free-form metadata; `arrays` is reserved for the directory.
    pub header: toml::Table,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut header = ckpt.header.clone();
    let mut dir = toml::value::Array::new();
    for a in &ckpt.arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::shape(
                "write_checkpoint",
                format!(
                    "array '{}' shape {:?} vs {} values",
                    a.name,
                    a.shape,
                    a.data.len()
                ),
            ));
        }
        let mut entry = toml::Table::new();
        entry.insert("name".into(), toml::Value::String(a.name.clone()));
        entry.insert(
            "shape".into(),
            toml::Value::Array(
                a.shape
                    .iter()
                    .map(|&s| toml::Value::Integer(s as i64))
                    .collect(),
            ),
        );
        dir.push(toml::Value::Table(entry));
    }
    header.insert("arrays".into(), toml::Value::Array(dir));
    let header_text = toml::to_string(&header)
        .map_err(|e| Error::CheckpointFormat(format!("header serialization: {}", e)))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_text.len() as u64).to_le_bytes())?;
    w.write_all(header_text.as_bytes())?;
    for a in &ckpt.arrays {
        for v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header_text = String::from_utf8(header_bytes)
        .map_err(|e| Error::CheckpointFormat(format!("header not UTF-8: {}", e)))?;
    let mut header: toml::Table = header_text
        .parse()
        .map_err(|e| Error::CheckpointFormat(format!("header parse: {}", e)))?;

    let dir = match header.remove("arrays") {
        Some(toml::Value::Array(dir)) => dir,
        _ => return Err(Error::CheckpointFormat("missing arrays directory".into())),
    };
    let mut arrays = Vec::with_capacity(dir.len());
    for entry in dir {
        let entry = entry
            .as_table()
            .ok_or_else(|| Error::CheckpointFormat("array entry is not a table".into()))?;
        let name = entry
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::CheckpointFormat("array entry without name".into()))?
            .to_string();
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::CheckpointFormat(format!("array '{}' without shape", name)))?
            .iter()
            .map(|v| {
                v.as_integer()
                    .filter(|&s| s >= 0)
                    .map(|s| s as usize)
                    .ok_or_else(|| {
                        Error::CheckpointFormat(format!("array '{}' has a bad dimension", name))
                    })
            })
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    Ok(Checkpoint { header, arrays })
}

pub(crate) fn config_to_table(config: &ModelConfig) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert("mode".into(), toml::Value::String(config.mode.as_str().into()));
    t.insert("n_layers".into(), toml::Value::Integer(config.n_layers as i64));
    t.insert("d_model".into(), toml::Value::Integer(config.d_model as i64));
    t.insert("n_heads".into(), toml::Value::Integer(config.n_heads as i64));
    t.insert("d_ff".into(), toml::Value::Integer(config.d_ff as i64));
    t.insert(
        "vocab_size".into(),
        toml::Value::Integer(config.vocab_size as i64),
    );
    t.insert(
        "max_seq_len".into(),
        toml::Value::Integer(config.max_seq_len as i64),
    );
    t.insert("dropout".into(), toml::Value::Float(config.dropout));
    t
}

pub(crate) fn config_from_table(t: &toml::Table) -> Result<ModelConfig> {
    let get_int = |k: &str| -> Result<usize> {
        t.get(k)
            .and_then(|v| v.as_integer())
            .filter(|&v| v >= 0)
            .map(|v| v as usize)
            .ok_or_else(|| Error::CheckpointFormat(format!("config field '{}' missing", k)))
    };
    let mode = t
        .get("mode")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::CheckpointFormat("config field 'mode' missing".into()))?;
    let config = ModelConfig {
        mode: ModelMode::parse(mode)?,
        n_layers: get_int("n_layers")?,
        d_model: get_int("d_model")?,
        n_heads: get_int("n_heads")?,
        d_ff: get_int("d_ff")?,
        vocab_size: get_int("vocab_size")?,
        max_seq_len: get_int("max_seq_len")?,
        dropout: t.get("dropout").and_then(|v| v.as_float()).unwrap_or(0.0),
    };
    config.validate()?;
    Ok(config)
}

/// Save config + weights (registry order), with optional extra metadata.
pub fn save_model(
    path: &Path,
    config: &ModelConfig,
    weights: &Weights,
    extra: toml::Table,
) -> Result<()> {
    let mut header = toml::Table::new();
    header.insert("config".into(), toml::Value::Table(config_to_table(config)));
    if !extra.is_empty() {
        header.insert("meta".into(), toml::Value::Table(extra));
    }
    let arrays = weights
        .tensors()
        .into_iter()
        .map(|(name, t)| NamedArray {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    write_checkpoint(path, &Checkpoint { header, arrays })
}

/// Load a model checkpoint written by [`save_model`]. Returns the config,
/// the weights, and any extra metadata.
pub fn load_model(path: &Path) -> Result<(ModelConfig, Weights, toml::Table)> {
    let ckpt = read_checkpoint(path)?;
    let config_table = ckpt
        .header
        .get("config")
        .and_then(|v| v.as_table())
        .ok_or_else(|| Error::CheckpointFormat("missing config table".into()))?;
    let config = config_from_table(config_table)?;
    let meta = ckpt
        .header
        .get("meta")
        .and_then(|v| v.as_table())
        .cloned()
        .unwrap_or_default();

    // rebuild weights through the registry so order and shapes are enforced;
    // arrays past the registry (optimizer state in trainer checkpoints) are
    // ignored here
    let mut weights = Weights::init(&config, 0)?;
    {
        let tensors = weights.tensors_mut();
        if tensors.len() > ckpt.arrays.len() {
            return Err(Error::CheckpointFormat(format!(
                "expected at least {} arrays, found {}",
                tensors.len(),
                ckpt.arrays.len()
            )));
        }
        for ((name, tensor), array) in tensors.into_iter().zip(&ckpt.arrays) {
            if name != array.name {
                return Err(Error::CheckpointFormat(format!(
                    "array order mismatch: expected '{}', found '{}'",
                    name, array.name
                )));
            }
            if tensor.shape() != array.shape.as_slice() {
                return Err(Error::CheckpointFormat(format!(
                    "array '{}' shape {:?} vs expected {:?}",
                    name,
                    array.shape,
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(&array.data);
        }
    }
    Ok((config, weights, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn container_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut header = toml::Table::new();
        header.insert("note".into(), toml::Value::String("hello".into()));
        let ckpt = Checkpoint {
            header,
            arrays: vec![
                NamedArray {
                    name: "a".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5e300],
                },
                NamedArray {
                    name: "b".into(),
                    shape: vec![3],
                    data: vec![0.1, 0.2, 0.3],
                },
            ],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.header.get("note").unwrap().as_str(), Some("hello"));
        assert_eq!(back.arrays.len(), 2);
        for (orig, got) in ckpt.arrays.iter().zip(&back.arrays) {
            assert_eq!(orig.name, got.name);
            assert_eq!(orig.shape, got.shape);
            let ob: Vec<u64> = orig.data.iter().map(|v| v.to_bits()).collect();
            let gb: Vec<u64> = got.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ob, gb, "payload must round-trip bit-exactly");
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTAOLABxxxxxxxxxxxx").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn model_round_trip_preserves_every_weight() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = super::super::ModelConfig::micro(ModelMode::DropeDecoder);
        let weights = Weights::init(&config, 41).unwrap();
        save_model(&path, &config, &weights, toml::Table::new()).unwrap();
        let (config2, weights2, _) = load_model(&path).unwrap();
        assert_eq!(config, config2);
        for ((n1, t1), (n2, t2)) in weights.tensors().iter().zip(weights2.tensors().iter()) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2, "weight '{}' must round-trip bit-exactly", n1);
        }
    }
}
