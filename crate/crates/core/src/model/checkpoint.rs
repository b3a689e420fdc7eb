//! Binary checkpoints: `SNAP`, u32 version, u32 header length, JSON header,
//! then every tensor as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Hyperparams, Model};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SNAP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    hyperparams: Hyperparams,
    tensors: Vec<TensorInfo>,
    #[serde(default)]
    training: serde_json::Value,
    #[serde(default)]
    manifest_hash: Option<String>,
}

/// A model plus optional extra named tensors (optimizer state) and free-form
/// training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub extra: Vec<(String, Tensor<T>)>,
    pub training: serde_json::Value,
    pub manifest_hash: Option<String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>) -> Self {
        Checkpoint {
            model,
            extra: Vec::new(),
            training: serde_json::Value::Null,
            manifest_hash: None,
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor<T>> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.model.param_names().map(str::to_owned);
        let all: Vec<(String, &Tensor<T>)> = names
            .zip(self.model.params())
            .chain(self.extra.iter().map(|(n, t)| (n.clone(), t)))
            .collect();
        let header = Header {
            hyperparams: self.model.hyper().clone(),
            tensors: all
                .iter()
                .map(|(n, t)| TensorInfo {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            training: self.training.clone(),
            manifest_hash: self.manifest_hash.clone(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let numel: usize = all.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 4 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &all {
            for v in t.data() {
                let f = v.to_f32().unwrap_or(f32::NAN);
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Corrupt(format!(
                "checkpoint truncated at {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                MAGIC
            )));
        }
        if bytes.len() < 12 {
            return Err(Error::Corrupt(format!(
                "checkpoint truncated at {} bytes",
                bytes.len()
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let header_len = word(8) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(Error::Corrupt(format!(
                "header needs {header_len} bytes, only {} present",
                body.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let data = &body[header_len..];
        let numel: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if data.len() != numel * 4 {
            return Err(Error::Corrupt(format!(
                "header lists {numel} values ({} bytes), file holds {} bytes",
                numel * 4,
                data.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for info in header.tensors {
            let n: usize = info.shape.iter().product();
            let values = data[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            offset += 4 * n;
            tensors.push((info.name, Tensor::new(&info.shape, values)?));
        }
        let model_len = header.hyperparams.param_tensor_count();
        if tensors.len() < model_len {
            return Err(Error::Corrupt(format!(
                "expected at least {model_len} tensors, header lists {}",
                tensors.len()
            )));
        }
        let extra = tensors.split_off(model_len);
        let model = Model::from_tensors(header.hyperparams, tensors)?;
        Ok(Checkpoint {
            model,
            extra,
            training: header.training,
            manifest_hash: header.manifest_hash,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Ok(Checkpoint::load(path)?.model)
}
