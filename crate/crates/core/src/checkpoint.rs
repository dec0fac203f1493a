//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u64` little-endian metadata length, JSON metadata,
//! then every tensor as little-endian values of the scalar named in the
//! metadata, in metadata order.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"GOELANv1";

/// Optimizer progress stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub best_map50: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Section {
    Param,
    Buffer,
    Momentum,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    section: Section,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    scalar: String,
    model: ModelConfig,
    class_names: Vec<String>,
    state: Option<TrainState>,
    tensors: Vec<TensorMeta>,
}

/// A model with optional optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub class_names: Vec<String>,
    pub state: Option<TrainState>,
    /// Momentum buffers, one per parameter in store order; empty when absent.
    pub momentum: Vec<ArrayD<T>>,
}

fn ck_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = self.model.store();
        let mut tensors = Vec::new();
        let mut values: Vec<&ArrayD<T>> = Vec::new();
        for p in store.params() {
            tensors.push(TensorMeta {
                name: p.name.clone(),
                section: Section::Param,
                shape: p.value.shape().to_vec(),
            });
            values.push(&p.value);
        }
        for b in store.buffers() {
            tensors.push(TensorMeta {
                name: b.name.clone(),
                section: Section::Buffer,
                shape: b.value.shape().to_vec(),
            });
            values.push(&b.value);
        }
        for (p, m) in store.params().iter().zip(&self.momentum) {
            tensors.push(TensorMeta {
                name: p.name.clone(),
                section: Section::Momentum,
                shape: m.shape().to_vec(),
            });
            values.push(m);
        }
        let meta = Meta {
            scalar: T::NAME.to_string(),
            model: self.model.config().clone(),
            class_names: self.class_names.clone(),
            state: self.state.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::with_capacity(16 + json.len() + values.iter().map(|v| v.len()).sum::<usize>() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.write_u64::<LittleEndian>(json.len() as u64).expect("write to vec");
        out.extend_from_slice(&json);
        for v in values {
            for x in v.iter() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Values stored at a different precision are converted.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| ck_err(path, "file too short"))?;
        if &magic != MAGIC {
            return Err(ck_err(path, "not a checkpoint (bad magic)"));
        }
        let len = cur.read_u64::<LittleEndian>().map_err(|_| ck_err(path, "truncated header"))? as usize;
        let start = cur.position() as usize;
        let json = bytes.get(start..start + len).ok_or_else(|| ck_err(path, "truncated metadata"))?;
        let meta: Meta = serde_json::from_slice(json).map_err(|e| ck_err(path, format!("bad metadata: {e}")))?;
        cur.set_position((start + len) as u64);
        let width = match meta.scalar.as_str() {
            "f32" => f32::BYTES,
            "f64" => f64::BYTES,
            other => return Err(ck_err(path, format!("unknown scalar type {other}"))),
        };
        let read_value = |cur: &mut Cursor<&[u8]>| -> Result<T> {
            let at = cur.position() as usize;
            let chunk = bytes.get(at..at + width).ok_or_else(|| ck_err(path, "truncated tensor data"))?;
            cur.set_position((at + width) as u64);
            Ok(if width == 4 { T::of(f32::read_le(chunk) as f64) } else { T::of(f64::read_le(chunk)) })
        };
        let mut model = Model::<T>::build(meta.model.clone()).map_err(|e| ck_err(path, format!("invalid model config: {e}")))?;
        let mut momentum = Vec::new();
        for t in &meta.tensors {
            let n: usize = t.shape.iter().product();
            let data = (0..n).map(|_| read_value(&mut cur)).collect::<Result<Vec<T>>>()?;
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), data).map_err(|e| ck_err(path, e.to_string()))?;
            let store = model.store_mut();
            let slot = match t.section {
                Section::Param => store.param_id(&t.name).map(|id| &mut store.param_mut(id).value),
                Section::Buffer => store.buffer_id(&t.name).map(|id| &mut store.buffer_mut(id).value),
                Section::Momentum => {
                    momentum.push(arr);
                    continue;
                }
            };
            let slot = slot.ok_or_else(|| ck_err(path, format!("unknown tensor {}", t.name)))?;
            if slot.shape() != arr.shape() {
                return Err(ck_err(path, format!("tensor {} has shape {:?}, model expects {:?}", t.name, arr.shape(), slot.shape())));
            }
            *slot = arr;
        }
        if cur.position() as usize != bytes.len() {
            return Err(ck_err(path, "trailing bytes after tensor data"));
        }
        if !momentum.is_empty() && momentum.len() != model.store().params().len() {
            return Err(ck_err(path, "momentum buffers do not match the parameters"));
        }
        Ok(Self {
            model,
            class_names: meta.class_names,
            state: meta.state,
            momentum,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = Model::<f32>::build(ModelConfig::toy(2, 64)).unwrap();
        let momentum = model.store().params().iter().map(|p| p.value.mapv(|v| v * 0.5)).collect();
        let ck = Checkpoint {
            model,
            class_names: vec!["a".into(), "b".into()],
            state: Some(TrainState {
                epoch: 3,
                step: 17,
                best_map50: Some(0.25),
                seed: 9,
            }),
            momentum,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state, ck.state);
        // widening keeps values exactly
        let wide = Checkpoint::<f64>::from_bytes(&bytes, Path::new("mem")).unwrap();
        let (a, b) = (&ck.model.store().params()[0].value, &wide.model.store().params()[0].value);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| *x as f64 == *y));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"nonsense", Path::new("mem")).is_err());
    }
}
