use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{ParamKind, ParamStore};
use crate::storage::{encode_tensor, read_tensor_as, write_tensor};

use super::{DvltaModel, HarnessError, ModelShapes, RunConfig};

pub const CHECKPOINT_FORMAT: &str = "dvlta-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

/// A model with its weights, configuration and input shapes.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub shapes: ModelShapes,
    pub store: ParamStore<f32>,
    pub model: DvltaModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    kind: ParamKind,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Index {
    format: String,
    version: u32,
    config: RunConfig,
    shapes: ModelShapes,
    params: Vec<ParamEntry>,
}

fn file_name(i: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("p{i:03}_{safe}.dvlt")
}

impl Checkpoint {
    /// A freshly initialized model, weights drawn from `rng`.
    pub fn init(config: &RunConfig, shapes: ModelShapes, rng: &mut ChaCha8Rng) -> Result<Self, HarnessError> {
        let mut store = ParamStore::new();
        let model = DvltaModel::new(&mut store, config, shapes, rng)?;
        Ok(Self {
            config: config.clone(),
            shapes,
            store,
            model,
        })
    }

    /// Writes `index.json` plus one tensor file per parameter into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let mut params = Vec::with_capacity(self.store.len());
        for (id, p) in self.store.iter() {
            let file = file_name(id.index(), &p.name);
            write_tensor(&p.value, dir.join(&file))?;
            params.push(ParamEntry {
                name: p.name.clone(),
                file,
                shape: p.value.shape().to_vec(),
                kind: p.kind,
                trainable: p.trainable,
            });
        }
        let index = Index {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            shapes: self.shapes,
            params,
        };
        let path = dir.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, json).map_err(|e| HarnessError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let dir = dir.as_ref();
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let index: Index = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Data(format!("{}: malformed checkpoint index: {e}", path.display())))?;
        if index.format != CHECKPOINT_FORMAT || index.version != CHECKPOINT_VERSION {
            return Err(HarnessError::Data(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                index.format,
                index.version
            )));
        }
        let mut ckpt = Self::init(&index.config, index.shapes, &mut ChaCha8Rng::seed_from_u64(index.config.seed))?;
        if ckpt.store.len() != index.params.len() {
            return Err(HarnessError::Data(format!(
                "checkpoint lists {} parameters, model has {}",
                index.params.len(),
                ckpt.store.len()
            )));
        }
        for entry in &index.params {
            let id = ckpt
                .store
                .id(&entry.name)
                .ok_or_else(|| HarnessError::Data(format!("checkpoint parameter {} is unknown", entry.name)))?;
            let value = read_tensor_as::<f32>(dir.join(&entry.file))?;
            let p = ckpt.store.get_mut(id);
            if value.shape() != p.value.shape() || entry.shape != p.value.shape() {
                return Err(HarnessError::Data(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    entry.name,
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
            p.trainable = entry.trainable;
        }
        Ok(ckpt)
    }

    /// SHA-256 over parameter names and encoded values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            h.update(encode_tensor(&p.value).expect("parameters encode"));
        }
        hex::encode(h.finalize())
    }
}
