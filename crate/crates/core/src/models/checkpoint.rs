//! Checkpoint directories: `manifest.json` describing every tensor and
//! `params.bin` holding their values as little-endian `f64` in manifest
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CategoryVocabulary, FeatureSchema};
use crate::error::{Error, Result};

use super::{Model, ModelConfig, ModelKind};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelKind,
    pub config: ModelConfig,
    pub schema_hash: String,
    pub vocabulary: CategoryVocabulary,
    pub tensors: Vec<TensorEntry>,
}

/// A model together with the preprocessing state it was trained against.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocabulary: CategoryVocabulary,
    pub schema_hash: String,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model, vocabulary: &CategoryVocabulary) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for p in model.store.iter() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            trainable: p.trainable,
        });
    }
    let manifest = Manifest {
        model: model.kind,
        config: model.config.clone(),
        schema_hash: FeatureSchema.hash(),
        vocabulary: vocabulary.clone(),
        tensors,
    };
    let bin = dir.join(PARAMS);
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&man, text).map_err(|e| Error::io(&man, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint, rejecting it if it was written under a different
/// feature schema.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let expected = FeatureSchema.hash();
    if manifest.schema_hash != expected {
        return Err(Error::SchemaMismatch {
            expected,
            found: manifest.schema_hash,
        });
    }
    let mut model = Model::init(manifest.model, manifest.config.clone(), 0)?;
    if model.store.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, {} model has {}",
            manifest.tensors.len(),
            manifest.model,
            model.store.len()
        )));
    }
    let bin = dir.join(PARAMS);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "{PARAMS} has {} bytes, manifest needs {}",
            bytes.len(),
            total * 8
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (p, entry) in model.store.iter_mut().zip(&manifest.tensors) {
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() || entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match manifest entry `{}` {:?} ({})",
                p.name,
                p.value.shape(),
                entry.name,
                entry.shape,
                entry.dtype
            )));
        }
        for v in p.value.data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(Checkpoint {
        model,
        vocabulary: manifest.vocabulary,
        schema_hash: manifest.schema_hash,
    })
}
