//! Parameter archives on top of the safetensors container.
//!
//! Every tensor is stored as little-endian `F64` under its parameter name.
//! Model metadata (configuration, vocabulary, corpus digest) travels as one
//! JSON document under the `revcore` header key so the header bytes are
//! deterministic.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::params::{Mat, ParamStore};
use super::NnError;

const META_KEY: &str = "revcore";

/// Serializes `store` plus `meta` into safetensors bytes.
pub fn to_bytes<M: Serialize>(store: &ParamStore, meta: &M) -> Result<Vec<u8>, NnError> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(_, name, value)| {
            let bytes = value.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), vec![value.nrows(), value.ncols()], bytes)
        })
        .collect();
    let views = raw
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes).map(|v| (name.clone(), v))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let meta_json =
        serde_json::to_string(meta).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let info = HashMap::from([(META_KEY.to_string(), meta_json)]);
    safetensors::serialize(views, Some(info)).map_err(|e| NnError::Checkpoint(e.to_string()))
}

pub fn save<M: Serialize>(path: &Path, store: &ParamStore, meta: &M) -> Result<(), NnError> {
    let bytes = to_bytes(store, meta)?;
    std::fs::write(path, bytes).map_err(|e| NnError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Tensors and metadata read back from an archive.
#[derive(Debug)]
pub struct Archive {
    tensors: HashMap<String, Mat>,
    meta_json: String,
}

impl Archive {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |e: safetensors::SafeTensorError| NnError::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY).cloned())
            .ok_or_else(|| NnError::Checkpoint("missing metadata header".into()))?;
        let st = SafeTensors::deserialize(bytes).map_err(bad)?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
                return Err(NnError::Checkpoint(format!(
                    "tensor {name}: expected 2-d F64, found {:?} {:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            let values: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let shape = (view.shape()[0], view.shape()[1]);
            let mat = Mat::from_shape_vec(shape, values)
                .map_err(|e| NnError::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.insert(name, mat);
        }
        Ok(Self { tensors, meta_json })
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| NnError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M, NnError> {
        serde_json::from_str(&self.meta_json).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Overwrites every parameter of `store` with the same-named tensor.
    /// Missing names, extra names and shape changes are all errors.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), NnError> {
        if self.tensors.len() != store.len() {
            return Err(NnError::Checkpoint(format!(
                "archive holds {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
            if t.dim() != store.get(id).dim() {
                return Err(NnError::Checkpoint(format!(
                    "tensor {name}: shape {:?} != expected {:?}",
                    t.dim(),
                    store.get(id).dim()
                )));
            }
            store.set(id, t.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_preserves_bits_and_metadata() {
        let mut store = ParamStore::new();
        store.add("a", array![[0.1, -2.5e-300], [f64::MIN_POSITIVE, 3.0]]);
        store.add("b.c", array![[1.0 / 3.0]]);
        let bytes = to_bytes(&store, &serde_json::json!({"kind": "test", "n": 2})).unwrap();
        assert_eq!(bytes, to_bytes(&store, &serde_json::json!({"kind": "test", "n": 2})).unwrap());
        let archive = Archive::from_bytes(&bytes).unwrap();
        let meta: serde_json::Value = archive.meta().unwrap();
        assert_eq!(meta["kind"], "test");

        let mut fresh = ParamStore::new();
        fresh.add("a", Mat::zeros((2, 2)));
        fresh.add("b.c", Mat::zeros((1, 1)));
        archive.restore_into(&mut fresh).unwrap();
        for ((_, _, x), (_, _, y)) in store.iter().zip(fresh.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Mat::zeros((2, 2)));
        let archive = Archive::from_bytes(&to_bytes(&store, &0).unwrap()).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Mat::zeros((3, 2)));
        assert!(archive.restore_into(&mut other).is_err());
    }
}
