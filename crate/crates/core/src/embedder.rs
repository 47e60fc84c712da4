//! Count-level prompts and their fixed-dimension condition embeddings.
//!
//! Two backends produce embeddings: a deterministic offline fallback (seeded
//! unit vector per prompt, no external data) and an adapter that loads
//! embeddings precomputed by a pretrained CLIP text encoder. Both yield
//! L2-normalized vectors; the training and evaluation paths never require
//! the pretrained data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::countsim::CountLevel;
use crate::error::{Error, Result};
use crate::ptf;

pub const DEFAULT_DIM: usize = 512;
pub const DEFAULT_PATTERN: &str = "a {level} count level PET image";

/// Prompt pattern with a single `{level}` placeholder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PromptTemplate {
    pub pattern: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            pattern: DEFAULT_PATTERN.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches("{level}").count() != 1 {
            return Err(Error::Config(format!(
                "prompt template '{pattern}' must contain exactly one {{level}} placeholder"
            )));
        }
        Ok(PromptTemplate { pattern })
    }
}

/// Render the prompt for a level: fractions as "1/N", the full level as
/// "full".
pub fn prompt_for(level: CountLevel, template: &PromptTemplate) -> String {
    template.pattern.replace("{level}", &level.label())
}

/// Unit-norm embedding of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub vector: Array1<f32>,
    pub source: String,
    pub prompt: String,
}

/// Where embeddings come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderBackend {
    /// Seeded unit vector per prompt; self-contained and offline.
    DeterministicFallback { seed: u64, dim: usize },
    /// Embeddings exported from a pretrained CLIP text encoder, stored as a
    /// prompt-keyed table on disk (see `clip_export` docs in the README).
    /// Loading fails loudly when the export is missing; there is no silent
    /// fallback.
    PretrainedClipText { path: PathBuf, dim: usize },
}

impl EmbedderBackend {
    pub fn fallback(seed: u64) -> Self {
        EmbedderBackend::DeterministicFallback {
            seed,
            dim: DEFAULT_DIM,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbedderBackend::DeterministicFallback { dim, .. } => *dim,
            EmbedderBackend::PretrainedClipText { dim, .. } => *dim,
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            EmbedderBackend::DeterministicFallback { seed, dim } => {
                format!("fallback(seed={seed}, dim={dim})")
            }
            EmbedderBackend::PretrainedClipText { path, dim } => {
                format!("clip-text({}, dim={dim})", path.display())
            }
        }
    }

    /// Embed a prompt: pure function of (backend, prompt), unit norm.
    pub fn embed(&self, prompt: &str) -> Result<ConditionEmbedding> {
        if prompt.is_empty() {
            return Err(Error::Config("prompt must be nonempty".to_string()));
        }
        let vector = match self {
            EmbedderBackend::DeterministicFallback { seed, dim } => {
                fallback_vector(*seed, prompt, *dim)
            }
            EmbedderBackend::PretrainedClipText { path, dim } => {
                let v = load_pretrained_prompt(path, prompt)?;
                if v.len() != *dim {
                    return Err(Error::Config(format!(
                        "pretrained embedding for '{prompt}' has dimension {}, expected {dim}",
                        v.len()
                    )));
                }
                v
            }
        };
        Ok(ConditionEmbedding {
            vector: l2_normalize(vector)?,
            source: self.descriptor(),
            prompt: prompt.to_string(),
        })
    }
}

fn l2_normalize(v: Array1<f32>) -> Result<Array1<f32>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("embedding contains non-finite entries".to_string()));
    }
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric("embedding has zero norm".to_string()));
    }
    Ok(v.mapv(|x| (f64::from(x) / norm) as f32))
}

/// Standard-normal vector keyed by (seed, prompt bytes) via SHA-256, then
/// normalized. Stable across platforms.
fn fallback_vector(seed: u64, prompt: &str, dim: usize) -> Array1<f32> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(prompt.as_bytes());
    let digest = hasher.finalize();
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    Array1::from_iter((0..dim).map(|_| {
        let x: f64 = StandardNormal.sample(&mut rng);
        x as f32
    }))
}

#[derive(Serialize, Deserialize)]
struct PretrainedManifest {
    dim: usize,
    model: String,
    /// Which encoder output the export captured, e.g.
    /// "eos-token-projection".
    output: String,
    entries: Vec<PretrainedEntry>,
}

#[derive(Serialize, Deserialize)]
struct PretrainedEntry {
    prompt: String,
    file: String,
}

fn load_pretrained_prompt(dir: &Path, prompt: &str) -> Result<Array1<f32>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Io {
            path: manifest_path.clone(),
            source: std::io::Error::new(
                e.kind(),
                format!("pretrained CLIP export unavailable: {e}"),
            ),
        }
    })?;
    let manifest: PretrainedManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.prompt == prompt)
        .ok_or_else(|| {
            Error::Config(format!(
                "pretrained export at {} has no entry for prompt '{prompt}'",
                dir.display()
            ))
        })?;
    let tensor = ptf::read_file(dir.join(&entry.file))?;
    let arr = tensor.as_f32()?;
    let flat: Vec<f32> = arr.iter().cloned().collect();
    Ok(Array1::from_vec(flat))
}

/// Precomputed level-to-embedding map used by the model and the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    entries: BTreeMap<CountLevel, ConditionEmbedding>,
    pub dim: usize,
    pub backend_descriptor: String,
}

impl EmbeddingTable {
    pub fn get(&self, level: CountLevel) -> Result<&ConditionEmbedding> {
        self.entries.get(&level).ok_or_else(|| {
            Error::Config(format!("embedding table has no entry for level {level}"))
        })
    }

    pub fn levels(&self) -> impl Iterator<Item = CountLevel> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, level: CountLevel) -> bool {
        self.entries.contains_key(&level)
    }

    /// Serialize: one PTF tensor per level plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut listed = Vec::new();
        for (level, emb) in &self.entries {
            let file = format!("{}.ptf", sanitize_label(&level.label()));
            ptf::write_file(
                dir.join(&file),
                &ptf::Tensor::F32(emb.vector.clone().into_dyn()),
            )?;
            listed.push(TableEntry {
                level: *level,
                file,
                prompt: emb.prompt.clone(),
                source: emb.source.clone(),
            });
        }
        let manifest = TableManifest {
            dim: self.dim,
            backend: self.backend_descriptor.clone(),
            entries: listed,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("serializing embedding manifest: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: TableManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for entry in manifest.entries {
            let tensor = ptf::read_file(dir.join(&entry.file))?;
            let arr = tensor.as_f32()?;
            if arr.len() != manifest.dim {
                return Err(Error::Shape(format!(
                    "embedding for {} has dimension {}, manifest says {}",
                    entry.level,
                    arr.len(),
                    manifest.dim
                )));
            }
            entries.insert(
                entry.level,
                ConditionEmbedding {
                    vector: Array1::from_iter(arr.iter().cloned()),
                    source: entry.source,
                    prompt: entry.prompt,
                },
            );
        }
        Ok(EmbeddingTable {
            entries,
            dim: manifest.dim,
            backend_descriptor: manifest.backend,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TableManifest {
    dim: usize,
    backend: String,
    entries: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    level: CountLevel,
    file: String,
    prompt: String,
    source: String,
}

fn sanitize_label(label: &str) -> String {
    label.replace('/', "_")
}

/// Build the table for a level set. Duplicate levels are rejected.
pub fn embedding_table(
    backend: &EmbedderBackend,
    levels: &[CountLevel],
    template: &PromptTemplate,
) -> Result<EmbeddingTable> {
    if levels.is_empty() {
        return Err(Error::Config("embedding table needs at least one level".to_string()));
    }
    let mut entries = BTreeMap::new();
    for &level in levels {
        let prompt = prompt_for(level, template);
        let emb = backend.embed(&prompt)?;
        if entries.insert(level, emb).is_some() {
            return Err(Error::Config(format!(
                "duplicate level {level} in embedding table request"
            )));
        }
    }
    Ok(EmbeddingTable {
        entries,
        dim: backend.dim(),
        backend_descriptor: backend.descriptor(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countsim::registry;

    #[test]
    fn prompt_rendering() {
        let t = PromptTemplate::default();
        let lvl = CountLevel::new(1, 100).unwrap();
        assert_eq!(prompt_for(lvl, &t), "a 1/100 count level PET image");
        assert_eq!(
            prompt_for(CountLevel::full(), &t),
            "a full count level PET image"
        );
        assert_eq!(prompt_for(lvl, &t), prompt_for(lvl, &t));
    }

    #[test]
    fn template_requires_single_placeholder() {
        assert!(PromptTemplate::new("no placeholder").is_err());
        assert!(PromptTemplate::new("{level} and {level}").is_err());
        assert!(PromptTemplate::new("{level} PET").is_ok());
    }

    #[test]
    fn fallback_is_deterministic_and_unit_norm() {
        let backend = EmbedderBackend::fallback(7);
        let a = backend.embed("a 1/100 count level PET image").unwrap();
        let b = backend.embed("a 1/100 count level PET image").unwrap();
        assert_eq!(a.vector, b.vector);
        let norm: f64 = a.vector.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        assert_eq!(a.vector.len(), DEFAULT_DIM);
    }

    #[test]
    fn registry_prompts_are_nearly_orthogonal() {
        let backend = EmbedderBackend::fallback(7);
        let template = PromptTemplate::default();
        let embs: Vec<_> = registry()
            .into_iter()
            .map(|l| backend.embed(&prompt_for(l, &template)).unwrap())
            .collect();
        let mut pairs = 0;
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let dot: f64 = embs[i]
                    .vector
                    .iter()
                    .zip(embs[j].vector.iter())
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                assert!(
                    dot.abs() < 0.3,
                    "|cos| between {} and {} is {}",
                    embs[i].prompt,
                    embs[j].prompt,
                    dot.abs()
                );
                pairs += 1;
            }
        }
        assert_eq!(pairs, 15);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        assert!(EmbedderBackend::fallback(0).embed("").is_err());
    }

    #[test]
    fn table_roundtrip_is_bit_exact() {
        let backend = EmbedderBackend::fallback(11);
        let table = embedding_table(&backend, &registry(), &PromptTemplate::default()).unwrap();
        assert_eq!(table.len(), 6);

        let dir = tempfile::tempdir().unwrap();
        table.save(dir.path()).unwrap();
        let loaded = EmbeddingTable::load(dir.path()).unwrap();
        assert_eq!(table, loaded);

        let rebuilt = embedding_table(&backend, &registry(), &PromptTemplate::default()).unwrap();
        assert_eq!(table, rebuilt);
    }

    #[test]
    fn missing_pretrained_export_is_a_load_error() {
        let backend = EmbedderBackend::PretrainedClipText {
            path: PathBuf::from("/nonexistent/clip-export"),
            dim: DEFAULT_DIM,
        };
        let err = backend.embed("a full count level PET image").unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "got {err:?}");
    }

    #[test]
    fn pretrained_export_loads_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let vec = Array1::from_vec(vec![3.0_f32, 4.0]);
        ptf::write_file(dir.path().join("p0.ptf"), &ptf::Tensor::F32(vec.into_dyn())).unwrap();
        let manifest = serde_json::json!({
            "dim": 2,
            "model": "clip-vit-b32",
            "output": "eos-token-projection",
            "entries": [{"prompt": "a full count level PET image", "file": "p0.ptf"}],
        });
        std::fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();

        let backend = EmbedderBackend::PretrainedClipText {
            path: dir.path().to_path_buf(),
            dim: 2,
        };
        let emb = backend.embed("a full count level PET image").unwrap();
        assert!((emb.vector[0] - 0.6).abs() < 1e-6);
        assert!((emb.vector[1] - 0.8).abs() < 1e-6);
        assert!(backend.embed("unknown prompt").is_err());
    }
}
