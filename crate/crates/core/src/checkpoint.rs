//! Single-file model checkpoints.
//!
//! Layout: `CPCK`, u16 version, u16 reserved, u64 index length, the JSON
//! index, then every tensor as little-endian `f32` in registration order.
//! Index offsets are byte offsets from the start of the tensor data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::ClassMap;
use crate::error::{CopeError, Result};
use crate::model::{CopeModel, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE: &str = "f32-le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    offset: u64,
    shape: [usize; 2],
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    model: ModelConfig,
    classes: Vec<String>,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn checkpoint_bytes(model: &CopeModel, classes: &ClassMap) -> Result<Vec<u8>> {
    if classes.len() != model.config().num_classes {
        return Err(CopeError::Compatibility(format!(
            "{} class names for a {}-way classifier",
            classes.len(),
            model.config().num_classes
        )));
    }
    let mut tensors = BTreeMap::new();
    let mut data = Vec::with_capacity(model.store().numel() * 4);
    for (_, p) in model.store().iter() {
        tensors.insert(
            p.name.clone(),
            TensorEntry {
                offset: data.len() as u64,
                shape: [p.value.rows(), p.value.cols()],
                dtype: DTYPE.to_string(),
            },
        );
        for v in p.value.data() {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let index = Index {
        model: model.config().clone(),
        classes: classes.products().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&index).map_err(|e| CopeError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint(model: &CopeModel, classes: &ClassMap, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, classes)?)?;
    Ok(())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(CopeModel, ClassMap)> {
    let bad = |m: &str| CopeError::Format(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing CPCK header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated index"))?;
    let index: Index = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let data = &bytes[16 + len..];

    let classes = ClassMap::new(index.classes.clone());
    if classes.products() != index.classes.as_slice() {
        return Err(bad("class list is not sorted and unique"));
    }
    let mut model = CopeModel::new(&index.model, 0)?;
    if classes.len() != model.config().num_classes {
        return Err(CopeError::Compatibility(format!(
            "{} class names for a {}-way classifier",
            classes.len(),
            model.config().num_classes
        )));
    }
    if index.tensors.len() != model.store().len() {
        return Err(CopeError::Compatibility(format!(
            "checkpoint holds {} tensors, model has {}",
            index.tensors.len(),
            model.store().len()
        )));
    }
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let name = model.store().get(id).name.clone();
        let entry = index
            .tensors
            .get(&name)
            .ok_or_else(|| CopeError::Compatibility(format!("checkpoint lacks tensor {name}")))?;
        let shape = model.store().value(id).shape();
        if entry.dtype != DTYPE {
            return Err(bad(&format!("{name}: dtype {}", entry.dtype)));
        }
        if (entry.shape[0], entry.shape[1]) != shape {
            return Err(CopeError::Compatibility(format!(
                "{name}: stored shape {:?}, model expects {shape:?}",
                entry.shape
            )));
        }
        let start = entry.offset as usize;
        let raw = data
            .get(start..start + shape.0 * shape.1 * 4)
            .ok_or_else(|| bad(&format!("{name}: data out of range")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        *model.store_mut().value_mut(id) = Tensor::from_vec(shape.0, shape.1, values)?;
    }
    Ok((model, classes))
}

pub fn load_checkpoint(path: &Path) -> Result<(CopeModel, ClassMap)> {
    checkpoint_from_bytes(&fs::read(path)?)
}
