//! Checkpoint archive: named parameter tensors as PTF entries, optimizer
//! moments, the embedding table, and a JSON manifest carrying the model
//! config, embedder descriptor, global scale, and config snapshot.
//! Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::condunet::{self, ModelConfig, ModelParameters};
use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::ptf;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Conditional,
    PlainUnet,
}

/// AdamW moments, parallel to the parameter list.
#[derive(Clone)]
pub struct OptimizerState {
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
    pub step: u64,
}

pub struct Checkpoint {
    pub kind: ModelKind,
    pub params: ModelParameters<f32>,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub rng_word_pos: u128,
    pub global_scale: f64,
    pub train_config: TrainConfig,
    pub table: EmbeddingTable,
    pub config_snapshot: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    kind: ModelKind,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    rng_word_pos: String,
    global_scale: f64,
    embedder: String,
    embedding_dim: usize,
    has_optimizer: bool,
    tensors: Vec<String>,
    config_snapshot: String,
}

const MANIFEST: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors";
const EMBED_DIR: &str = "embeds";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tdir = dir.join(TENSOR_DIR);
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;

        let mut tensor_names = Vec::new();
        for (name, value) in self.params.tensors() {
            ptf::write_file(
                tdir.join(format!("param.{name}.ptf")),
                &ptf::Tensor::F32(value.clone()),
            )?;
            tensor_names.push(name.to_string());
        }
        if let Some(opt) = &self.optimizer {
            for (i, name) in self.params.names().iter().enumerate() {
                ptf::write_file(
                    tdir.join(format!("adam_m.{name}.ptf")),
                    &ptf::Tensor::F32(opt.m[i].clone()),
                )?;
                ptf::write_file(
                    tdir.join(format!("adam_v.{name}.ptf")),
                    &ptf::Tensor::F32(opt.v[i].clone()),
                )?;
            }
        }
        self.table.save(&dir.join(EMBED_DIR))?;

        let manifest = CheckpointManifest {
            format_version: 1,
            kind: self.kind,
            model_config: self.params.config.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            rng_word_pos: self.rng_word_pos.to_string(),
            global_scale: self.global_scale,
            embedder: self.table.backend_descriptor.clone(),
            embedding_dim: self.table.dim,
            has_optimizer: self.optimizer.is_some(),
            tensors: tensor_names,
            config_snapshot: self.config_snapshot.clone(),
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("serializing checkpoint manifest: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;

        let mut params = condunet::init::<f32>(&manifest.model_config, 0)?;
        let expected: Vec<String> = params.names().to_vec();
        if manifest.tensors != expected {
            return Err(Error::Config(format!(
                "{}: tensor list does not match architecture ({} listed, {} expected)",
                path.display(),
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let tdir = dir.join(TENSOR_DIR);
        let mut loaded = Vec::new();
        for name in &expected {
            let t = ptf::read_file(tdir.join(format!("param.{name}.ptf")))?;
            loaded.push((name.clone(), t.as_f32()?.clone()));
        }
        params.load_tensors(&loaded)?;

        let optimizer = if manifest.has_optimizer {
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for name in &expected {
                m.push(ptf::read_file(tdir.join(format!("adam_m.{name}.ptf")))?.as_f32()?.clone());
                v.push(ptf::read_file(tdir.join(format!("adam_v.{name}.ptf")))?.as_f32()?.clone());
            }
            Some(OptimizerState {
                m,
                v,
                step: manifest.step,
            })
        } else {
            None
        };

        let table = EmbeddingTable::load(&dir.join(EMBED_DIR))?;
        if table.dim != manifest.embedding_dim {
            return Err(Error::Shape(format!(
                "embedding table dimension {} does not match manifest {}",
                table.dim, manifest.embedding_dim
            )));
        }
        let rng_word_pos: u128 = manifest
            .rng_word_pos
            .parse()
            .map_err(|e| Error::Config(format!("{}: bad rng_word_pos: {e}", path.display())))?;

        Ok(Checkpoint {
            kind: manifest.kind,
            params,
            optimizer,
            step: manifest.step,
            rng_word_pos,
            global_scale: manifest.global_scale,
            train_config: manifest.train_config,
            table,
            config_snapshot: manifest.config_snapshot,
        })
    }
}
