//! Versioned model checkpoints stored as safetensors files with a JSON
//! metadata header.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{Layer, Param};

pub const FORMAT: &str = "writer-ssl";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Backbone and projector from self-supervised pretraining.
    Pretrain,
    /// Backbone and linear writer head.
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    /// Writer ids in class-index order (classifiers only).
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    /// Snapshot every parameter and buffer of the given layers; each layer's
    /// names are prefixed with its label.
    pub fn capture(meta: CheckpointMeta, layers: &mut [(&str, &mut dyn Layer)]) -> Self {
        let mut tensors = BTreeMap::new();
        for (label, layer) in layers.iter_mut() {
            layer.visit(label, &mut |name, p| {
                tensors.insert(
                    name.to_string(),
                    StoredTensor {
                        shape: p.shape.clone(),
                        data: p.value.clone(),
                    },
                );
            });
        }
        Checkpoint { meta, tensors }
    }

    /// Copy stored values into `layer`. Every parameter under `prefix` must be
    /// present with a matching shape.
    pub fn restore(&self, prefix: &str, layer: &mut dyn Layer) -> Result<()> {
        let mut err = None;
        layer.visit(prefix, &mut |name, p: &mut Param| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape != p.shape => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        t.shape, p.shape
                    )))
                }
                Some(t) => p.value.copy_from_slice(&t.data),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    t.shape.clone(),
                    t.data.iter().flat_map(|v| v.to_le_bytes()).collect(),
                )
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(k, shape, b)| {
                TensorView::new(Dtype::F32, shape.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        // A single metadata entry: safetensors takes a randomly seeded
        // HashMap, and several keys would be written in varying order.
        let header = Header {
            version: VERSION,
            meta: self.meta.clone(),
        };
        let info = HashMap::from([(FORMAT.to_string(), serde_json::to_string(&header)?)]);
        safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let info = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing metadata header".into()))?;
        let raw = info
            .get(FORMAT)
            .ok_or_else(|| Error::Checkpoint("not a writer-ssl checkpoint".into()))?;
        let header: Header = serde_json::from_str(raw)?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let meta = header.meta;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.iter() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} is {:?}, expected F32",
                    view.dtype()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(
                name.to_string(),
                StoredTensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Write to a temporary sibling, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
