//! Structured TOML run configuration. Unknown keys are rejected; every key
//! has a default, so a minimal file only overrides what it needs. The raw
//! config text is snapshotted into checkpoints and output directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::condunet::ModelConfig;
use crate::countsim::{registry, CountLevel};
use crate::embedder::{EmbedderBackend, PromptTemplate};
use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;
use crate::trainer::{Schedule, TrainConfig};

/// Environment variable pointing at a pretrained CLIP embedding export
/// (used when `embedder.kind = "pretrained-clip-text"` and no
/// `weights_dir` is configured).
pub const CLIP_EMBEDDINGS_ENV: &str = "PETCOND_CLIP_EMBEDDINGS";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub count: u64,
    pub size: usize,
    pub seed: u64,
    pub n_background_ellipses: usize,
    pub n_lesions: usize,
    pub background_intensity_range: (f64, f64),
    pub lesion_intensity_range: (f64, f64),
    pub lesion_radius_range: (f64, f64),
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            count: 48,
            size: 64,
            seed: 7,
            n_background_ellipses: 3,
            n_lesions: 2,
            background_intensity_range: (0.3, 1.0),
            lesion_intensity_range: (1.0, 3.0),
            lesion_radius_range: (2.0, 6.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub out_dir: PathBuf,
    pub total_expected_counts: u64,
    pub train_fraction: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            out_dir: PathBuf::from("out/dataset"),
            total_expected_counts: 2_000_000,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSection {
    /// "fallback" or "pretrained-clip-text".
    pub kind: String,
    pub seed: u64,
    pub dim: usize,
    pub weights_dir: Option<PathBuf>,
    pub prompt_template: String,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        EmbedderSection {
            kind: "fallback".to_string(),
            seed: 99,
            dim: 512,
            weights_dir: None,
            prompt_template: crate::embedder::DEFAULT_PATTERN.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depth: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub conv_kernel: usize,
    pub blocks_per_level: usize,
    pub groups_for_norm: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            depth: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 8],
            conv_kernel: 3,
            blocks_per_level: 2,
            groups_for_norm: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub out_dir: PathBuf,
    /// Defaults to `simulate.out_dir` when unset.
    pub dataset_dir: Option<PathBuf>,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Exactly one of `steps` / `epochs` may be set; `steps` wins the
    /// default (desk scale).
    pub steps: Option<u64>,
    pub epochs: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub levels: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            out_dir: PathBuf::from("out/train"),
            dataset_dir: None,
            learning_rate: 0.001,
            batch_size: 8,
            steps: Some(2000),
            epochs: None,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            seed: 1234,
            checkpoint_every: 500,
            levels: registry().iter().map(|l| l.label()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub out_dir: PathBuf,
    /// Defaults to `train.out_dir`/final when unset.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `train.out_dir`/plain/final when unset.
    pub plain_checkpoint: Option<PathBuf>,
    pub gaussian_sigmas: Vec<f64>,
    pub include_baselines: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            out_dir: PathBuf::from("out/eval"),
            checkpoint: None,
            plain_checkpoint: None,
            gaussian_sigmas: vec![0.5, 1.0, 1.5, 2.0, 3.0],
            include_baselines: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub out_dir: PathBuf,
    /// Defaults to `evaluate.out_dir` when unset.
    pub eval_dir: Option<PathBuf>,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            out_dir: PathBuf::from("out/report"),
            eval_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomSection,
    pub simulate: SimulateSection,
    pub embedder: EmbedderSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub report: ReportSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((cfg, text))
    }

    /// `--seed` override: repoints both the phantom and training seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.train.seed = seed;
    }

    pub fn phantom_spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            size: self.phantom.size,
            n_background_ellipses: self.phantom.n_background_ellipses,
            n_lesions: self.phantom.n_lesions,
            background_intensity_range: self.phantom.background_intensity_range,
            lesion_intensity_range: self.phantom.lesion_intensity_range,
            lesion_radius_range: self.phantom.lesion_radius_range,
        }
    }

    pub fn embedder_backend(&self) -> Result<EmbedderBackend> {
        match self.embedder.kind.as_str() {
            "fallback" => Ok(EmbedderBackend::DeterministicFallback {
                seed: self.embedder.seed,
                dim: self.embedder.dim,
            }),
            "pretrained-clip-text" => {
                let path = match &self.embedder.weights_dir {
                    Some(p) => p.clone(),
                    None => std::env::var_os(CLIP_EMBEDDINGS_ENV)
                        .map(PathBuf::from)
                        .ok_or_else(|| {
                            Error::Config(format!(
                                "pretrained-clip-text embedder needs embedder.weights_dir or {CLIP_EMBEDDINGS_ENV}"
                            ))
                        })?,
                };
                Ok(EmbedderBackend::PretrainedClipText {
                    path,
                    dim: self.embedder.dim,
                })
            }
            other => Err(Error::Config(format!(
                "unknown embedder kind '{other}' (expected 'fallback' or 'pretrained-clip-text')"
            ))),
        }
    }

    pub fn prompt_template(&self) -> Result<PromptTemplate> {
        PromptTemplate::new(self.embedder.prompt_template.clone())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.model.depth,
            base_channels: self.model.base_channels,
            channel_multipliers: self.model.channel_multipliers.clone(),
            conv_kernel: self.model.conv_kernel,
            blocks_per_level: self.model.blocks_per_level,
            embedding_dim: self.embedder.dim,
            groups_for_norm: self.model.groups_for_norm,
        }
    }

    pub fn train_levels(&self) -> Result<Vec<CountLevel>> {
        self.train.levels.iter().map(|s| CountLevel::parse(s)).collect()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let schedule = match (self.train.steps, self.train.epochs) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "train.steps and train.epochs are mutually exclusive".to_string(),
                ))
            }
            (Some(s), None) => Schedule::Steps(s),
            (None, Some(e)) => Schedule::Epochs(e),
            (None, None) => Schedule::Steps(2000),
        };
        Ok(TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            schedule,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            weight_decay: self.train.weight_decay,
            eps: self.train.eps,
            seed: self.train.seed,
            levels: self.train_levels()?,
            checkpoint_every: self.train.checkpoint_every,
        })
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.train
            .dataset_dir
            .clone()
            .unwrap_or_else(|| self.simulate.out_dir.clone())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.evaluate
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.train.out_dir.join("final"))
    }

    pub fn plain_checkpoint_path(&self) -> PathBuf {
        self.evaluate
            .plain_checkpoint
            .clone()
            .unwrap_or_else(|| self.train.out_dir.join("plain/final"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.report
            .eval_dir
            .clone()
            .unwrap_or_else(|| self.evaluate.out_dir.clone())
    }
}
