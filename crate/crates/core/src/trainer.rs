//! Training: patient-level dataset splitting, random count-pair sampling,
//! MSE optimization with AdamW, and checkpointing.
//!
//! One (input, output) level pair is sampled per step and shared by the
//! whole batch; input and target slices are thinned from the same
//! full-count slice, so supervision is paired. All randomness flows from
//! the single config seed: parameter init uses stream 0, data sampling
//! stream 1 of the same ChaCha key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind, OptimizerState};
use crate::condunet::{self, ModelConfig, ModelParameters};
use crate::countsim::{normalize, CountImage, CountLevel, ImageSlice};
use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::ptf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Steps(u64),
    Epochs(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub seed: u64,
    pub levels: Vec<CountLevel>,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 8,
            schedule: Schedule::Steps(2000),
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            seed: 1234,
            levels: crate::countsim::registry(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".to_string()));
        }
        if self.levels.len() < 2 {
            return Err(Error::Config("training needs at least 2 count levels".to_string()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_train_slices: usize) -> u64 {
        match self.schedule {
            Schedule::Steps(n) => n,
            Schedule::Epochs(e) => {
                let per_epoch = (n_train_slices / self.batch_size).max(1) as u64;
                e * per_epoch
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Seeds recorded in the dataset manifest. Per-phantom streams derive via
/// `countsim::derive_seed` (base XOR id).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestSeeds {
    pub base: u64,
    pub phantom: u64,
    pub poisson: u64,
    pub thin: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomEntry {
    pub id: u64,
    pub split: Split,
    pub activity: String,
    pub slices: BTreeMap<CountLevel, String>,
}

/// On-disk dataset description: ids with split assignment, per-level slice
/// paths, the normalization scale, and every seed used.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub size: usize,
    pub total_expected_counts: u64,
    pub levels: Vec<CountLevel>,
    pub global_scale: f64,
    pub seeds: ManifestSeeds,
    pub phantoms: Vec<PhantomEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn ids_in(&self, split: Split) -> Vec<u64> {
        self.phantoms
            .iter()
            .filter(|p| p.split == split)
            .map(|p| p.id)
            .collect()
    }

    /// Check structural invariants and that every referenced file exists
    /// and parses as a 2D tensor.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        if self.phantoms.is_empty() {
            return Err(Error::Config("manifest lists no phantoms".to_string()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.phantoms {
            if !seen.insert(p.id) {
                return Err(Error::Config(format!(
                    "phantom id {} appears in more than one entry",
                    p.id
                )));
            }
            let activity = dir.join(&p.activity);
            ptf::read_file(&activity)?.as_f64()?;
            for (level, rel) in &p.slices {
                let path = dir.join(rel);
                let tensor = ptf::read_file(&path)?;
                let counts = tensor.as_u32()?;
                if counts.ndim() != 2 {
                    return Err(Error::Shape(format!(
                        "{}: slice at level {level} is not 2D",
                        path.display()
                    )));
                }
            }
        }
        if self.ids_in(Split::Train).is_empty() || self.ids_in(Split::Test).is_empty() {
            return Err(Error::Config("both splits must be nonempty".to_string()));
        }
        Ok(())
    }
}

/// Assign phantoms to train/test at patient granularity: every slice of a
/// phantom inherits its split. Deterministic per seed, independent of the
/// input order of ids.
pub fn split_dataset(
    phantom_ids: &[u64],
    train_fraction: f64,
    seed: u64,
) -> Result<BTreeMap<u64, Split>> {
    if phantom_ids.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 phantoms to populate both splits, got {}",
            phantom_ids.len()
        )));
    }
    if train_fraction.is_nan() || train_fraction <= 0.0 || train_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut ids: Vec<u64> = phantom_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != phantom_ids.len() {
        return Err(Error::Config("phantom ids must be unique".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates.
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n = ids.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut out = BTreeMap::new();
    for (k, id) in ids.into_iter().enumerate() {
        out.insert(id, if k < n_train { Split::Train } else { Split::Test });
    }
    Ok(out)
}

/// Eligible ordered (input, output) level pairs, sampled uniformly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPolicy {
    pairs: Vec<(CountLevel, CountLevel)>,
}

impl PairPolicy {
    /// All ordered pairs with input strictly below output.
    pub fn from_levels(levels: &[CountLevel]) -> Result<Self> {
        let mut sorted: Vec<CountLevel> = levels.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut pairs = Vec::new();
        for i in 0..sorted.len() {
            for j in (i + 1)..sorted.len() {
                pairs.push((sorted[i], sorted[j]));
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config(
                "pair policy is empty: need at least two distinct levels".to_string(),
            ));
        }
        Ok(PairPolicy { pairs })
    }

    /// Degenerate single-pair policy (fixed-pair baseline training).
    pub fn single(input: CountLevel, output: CountLevel) -> Result<Self> {
        if input >= output {
            return Err(Error::Constraint(format!(
                "pair ({input}, {output}) violates input < output"
            )));
        }
        Ok(PairPolicy {
            pairs: vec![(input, output)],
        })
    }

    pub fn pairs(&self) -> &[(CountLevel, CountLevel)] {
        &self.pairs
    }

    pub fn levels(&self) -> Vec<CountLevel> {
        let mut out: Vec<CountLevel> = self
            .pairs
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (CountLevel, CountLevel) {
        self.pairs[rng.random_range(0..self.pairs.len())]
    }
}

/// All slices of a dataset, normalized and resident in memory.
pub struct LoadedDataset {
    pub slices: BTreeMap<u64, BTreeMap<CountLevel, ImageSlice>>,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub global_scale: f64,
    pub size: usize,
}

impl LoadedDataset {
    pub fn slice(&self, id: u64, level: CountLevel) -> Result<&ImageSlice> {
        self.slices
            .get(&id)
            .and_then(|m| m.get(&level))
            .ok_or_else(|| {
                Error::Config(format!("dataset has no slice for phantom {id} at level {level}"))
            })
    }
}

/// Load and normalize every listed slice. Fails fast on any missing or
/// malformed file.
pub fn load_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<LoadedDataset> {
    let mut slices = BTreeMap::new();
    for entry in &manifest.phantoms {
        let mut per_level = BTreeMap::new();
        for (&level, rel) in &entry.slices {
            let path = dir.join(rel);
            let counts = ptf::read_file(&path)?.into_u32_2d()?;
            let img = CountImage {
                counts,
                level,
                source_id: entry.id,
            };
            per_level.insert(level, normalize(&img, manifest.global_scale)?);
        }
        slices.insert(entry.id, per_level);
    }
    Ok(LoadedDataset {
        slices,
        train_ids: manifest.ids_in(Split::Train),
        test_ids: manifest.ids_in(Split::Test),
        global_scale: manifest.global_scale,
        size: manifest.size,
    })
}

/// Decoupled-weight-decay Adam over the flat parameter list. Gate tensors
/// can be frozen (plain U-Net baseline).
pub struct AdamW {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    frozen: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ModelParameters<f32>, cfg: &TrainConfig, freeze_gates: bool) -> Self {
        let m = condunet::zero_grads(params);
        let v = condunet::zero_grads(params);
        let frozen = (0..params.n_tensors())
            .map(|i| freeze_gates && params.is_gate(i))
            .collect();
        AdamW {
            lr: cfg.learning_rate as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.eps as f32,
            weight_decay: cfg.weight_decay as f32,
            step: 0,
            m,
            v,
            frozen,
        }
    }

    pub fn from_state(params: &ModelParameters<f32>, cfg: &TrainConfig, state: OptimizerState, freeze_gates: bool) -> Self {
        let mut opt = AdamW::new(params, cfg, freeze_gates);
        opt.m = state.m;
        opt.v = state.v;
        opt.step = state.step;
        opt
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            m: self.m.clone(),
            v: self.v.clone(),
            step: self.step,
        }
    }

    pub fn update(&mut self, params: &mut ModelParameters<f32>, grads: &[ArrayD<f32>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, grad) in grads.iter().enumerate() {
            if self.frozen[i] {
                continue;
            }
            self.m[i].zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let theta = params.value_mut(i);
            ndarray::Zip::from(theta)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|t, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *t -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *t);
                });
        }
    }
}

/// One optimization step on a batch sharing a single (input, output) pair.
/// `emb` is None for the gate-free backbone. Returns the MSE loss.
pub fn train_step(
    params: &mut ModelParameters<f32>,
    opt: &mut AdamW,
    inputs: &Array4<f32>,
    targets: &Array4<f32>,
    emb: Option<(&Array2<f32>, &Array2<f32>)>,
) -> Result<f64> {
    if inputs.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "input batch {:?} and target batch {:?} differ",
            inputs.dim(),
            targets.dim()
        )));
    }
    let (b, _, _, _) = inputs.dim();
    let numel = inputs.len() as f64;

    let per_sample: Vec<(f64, Vec<ArrayD<f32>>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let x = inputs.slice(s![bi, .., .., ..]).to_owned();
            let t = targets.slice(s![bi, .., .., ..]).to_owned();
            let rows = emb.map(|(ein, eout)| (ein.row(bi), eout.row(bi)));
            let (y, tape) = condunet::forward_one(
                params,
                x,
                rows.as_ref().map(|(e, _)| e),
                rows.as_ref().map(|(_, e)| e),
            );
            let diff = &y - &t;
            let loss: f64 = diff.iter().map(|&d| f64::from(d) * f64::from(d)).sum();
            let dy = diff.mapv(|d| 2.0 * d / numel as f32);
            let mut grads = condunet::zero_grads(params);
            condunet::backward_one(
                params,
                &tape,
                rows.as_ref().map(|(e, _)| e),
                rows.as_ref().map(|(_, e)| e),
                &dy,
                &mut grads,
            );
            (loss, grads)
        })
        .collect();

    let mut grads = condunet::zero_grads(params);
    let mut loss_sum = 0.0;
    for (l, g) in per_sample {
        loss_sum += l;
        for (acc, gi) in grads.iter_mut().zip(g.iter()) {
            acc.zip_mut_with(gi, |a, &b| *a += b);
        }
    }
    let loss = loss_sum / numel;
    if !loss.is_finite() {
        let gnorm: f64 = grads
            .iter()
            .map(|g| g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} (gradient norm {gnorm})"
        )));
    }
    opt.update(params, &grads);
    Ok(loss)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub pair: String,
    pub loss: f64,
    pub wall_secs: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Full training loop. `resume` continues from a checkpoint (parameters,
/// optimizer moments, and data-stream RNG position are all restored, so an
/// interrupted run reproduces the uninterrupted loss trace).
#[allow(clippy::too_many_arguments)]
pub fn train(
    data: &LoadedDataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    table: &EmbeddingTable,
    kind: ModelKind,
    policy: &PairPolicy,
    resume: Option<Checkpoint>,
    periodic_dir: Option<&Path>,
    config_snapshot: &str,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    model_config.validate()?;
    if table.dim != model_config.embedding_dim {
        return Err(Error::Shape(format!(
            "embedding table dimension {} does not match model D = {}",
            table.dim, model_config.embedding_dim
        )));
    }
    if data.train_ids.is_empty() {
        return Err(Error::Config("train split is empty".to_string()));
    }
    // Fail fast: every policy level must be embeddable and present for
    // every training phantom.
    for level in policy.levels() {
        table.get(level)?;
        for &id in &data.train_ids {
            data.slice(id, level)?;
        }
    }

    let gated = kind == ModelKind::Conditional;
    let (mut params, mut opt, mut rng, start_step) = match resume {
        Some(ckpt) => {
            if ckpt.params.config != *model_config {
                return Err(Error::Config(
                    "resume checkpoint has a different architecture".to_string(),
                ));
            }
            let opt_state = ckpt.optimizer.ok_or_else(|| {
                Error::Config("resume checkpoint lacks optimizer state".to_string())
            })?;
            let opt = AdamW::from_state(&ckpt.params, train_config, opt_state, !gated);
            let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
            rng.set_stream(1);
            rng.set_word_pos(ckpt.rng_word_pos);
            (ckpt.params, opt, rng, ckpt.step)
        }
        None => {
            let params = condunet::init::<f32>(model_config, train_config.seed)?;
            let opt = AdamW::new(&params, train_config, !gated);
            let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
            rng.set_stream(1);
            (params, opt, rng, 0)
        }
    };

    let n_train_slices = data.train_ids.len();
    let total = train_config.total_steps(n_train_slices);
    let (h, w) = (data.size, data.size);
    let bsz = train_config.batch_size;
    let mut log = Vec::new();
    let started = Instant::now();

    for step in (start_step + 1)..=total {
        let (lin, lout) = policy.sample(&mut rng);
        let ids = sample_batch_ids(&data.train_ids, bsz, &mut rng);

        let mut inputs = Array4::<f32>::zeros((bsz, 1, h, w));
        let mut targets = Array4::<f32>::zeros((bsz, 1, h, w));
        for (bi, &id) in ids.iter().enumerate() {
            inputs
                .slice_mut(s![bi, 0, .., ..])
                .assign(&data.slice(id, lin)?.intensity);
            targets
                .slice_mut(s![bi, 0, .., ..])
                .assign(&data.slice(id, lout)?.intensity);
        }

        let pair_label = format!("{lin}->{lout}");
        let loss = if gated {
            let e_in = tile_embedding(table, lin, bsz)?;
            let e_out = tile_embedding(table, lout, bsz)?;
            train_step(&mut params, &mut opt, &inputs, &targets, Some((&e_in, &e_out)))
        } else {
            train_step(&mut params, &mut opt, &inputs, &targets, None)
        }
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
            other => other,
        })?;

        log.push(LogRow {
            step,
            pair: pair_label,
            loss,
            wall_secs: started.elapsed().as_secs_f64(),
        });

        if let Some(dir) = periodic_dir {
            if train_config.checkpoint_every > 0
                && step % train_config.checkpoint_every == 0
                && step != total
            {
                let ckpt = assemble_checkpoint(
                    kind,
                    &params,
                    &opt,
                    step,
                    &rng,
                    data.global_scale,
                    train_config,
                    table,
                    config_snapshot,
                );
                ckpt.save(&dir.join(format!("step_{step:06}")))?;
            }
        }
    }

    let checkpoint = assemble_checkpoint(
        kind,
        &params,
        &opt,
        total,
        &rng,
        data.global_scale,
        train_config,
        table,
        config_snapshot,
    );
    Ok(TrainOutcome { checkpoint, log })
}

fn tile_embedding(table: &EmbeddingTable, level: CountLevel, b: usize) -> Result<Array2<f32>> {
    let v = &table.get(level)?.vector;
    let mut out = Array2::<f32>::zeros((b, v.len()));
    for mut row in out.outer_iter_mut() {
        row.assign(v);
    }
    Ok(out)
}

/// Distinct ids when the pool allows, otherwise uniform with replacement.
fn sample_batch_ids(pool: &[u64], batch: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    if pool.len() >= batch {
        let mut scratch: Vec<u64> = pool.to_vec();
        for i in 0..batch {
            let j = rng.random_range(i..scratch.len());
            scratch.swap(i, j);
        }
        scratch.truncate(batch);
        scratch
    } else {
        (0..batch)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble_checkpoint(
    kind: ModelKind,
    params: &ModelParameters<f32>,
    opt: &AdamW,
    step: u64,
    rng: &ChaCha8Rng,
    global_scale: f64,
    train_config: &TrainConfig,
    table: &EmbeddingTable,
    config_snapshot: &str,
) -> Checkpoint {
    Checkpoint {
        kind,
        params: params.clone(),
        optimizer: Some(opt.state()),
        step,
        rng_word_pos: rng.get_word_pos(),
        global_scale,
        train_config: train_config.clone(),
        table: table.clone(),
        config_snapshot: config_snapshot.to_string(),
    }
}

/// Write the training log as CSV: step, pair, loss, wall seconds.
pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("step,pair,loss,wall_secs\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.pair, r.loss, r.wall_secs));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn checkpoint_dir_final(out_dir: &Path) -> PathBuf {
    out_dir.join("final")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countsim::registry;
    use crate::embedder::{embedding_table, EmbedderBackend, PromptTemplate};
    use ndarray::Array4;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            conv_kernel: 3,
            blocks_per_level: 2,
            embedding_dim: 16,
            groups_for_norm: 2,
        }
    }

    fn tiny_train(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            schedule: Schedule::Steps(5),
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_examples() {
        let ids: Vec<u64> = (0..10).collect();
        let split = split_dataset(&ids, 0.8, 3).unwrap();
        let train = split.values().filter(|s| **s == Split::Train).count();
        assert_eq!(train, 8);
        assert_eq!(split.len() - train, 2);

        let again = split_dataset(&ids, 0.8, 3).unwrap();
        assert_eq!(split, again);

        let shuffled: Vec<u64> = vec![9, 3, 1, 7, 5, 0, 8, 2, 6, 4];
        assert_eq!(split, split_dataset(&shuffled, 0.8, 3).unwrap());

        let other = split_dataset(&ids, 0.8, 4).unwrap();
        assert!(split != other || split == other); // both valid; determinism asserted above

        assert!(split_dataset(&[1], 0.8, 0).is_err());
        assert!(split_dataset(&ids, 0.0, 0).is_err());
        assert!(split_dataset(&ids, 1.0, 0).is_err());
        assert!(split_dataset(&[1, 1, 2], 0.5, 0).is_err());

        // Extreme fractions still leave both splits nonempty.
        let tight = split_dataset(&[1, 2], 0.99, 0).unwrap();
        assert_eq!(tight.values().filter(|s| **s == Split::Train).count(), 1);
    }

    #[test]
    fn pair_policy_counts_and_constraint() {
        let policy = PairPolicy::from_levels(&registry()).unwrap();
        assert_eq!(policy.pairs().len(), 15);
        for &(a, b) in policy.pairs() {
            assert!(a < b);
        }

        let two = PairPolicy::from_levels(&registry()[..2]).unwrap();
        assert_eq!(two.pairs().len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let (a, b) = two.sample(&mut rng);
            assert_eq!((a, b), (registry()[0], registry()[1]));
        }

        assert!(PairPolicy::from_levels(&[CountLevel::full()]).is_err());
        assert!(PairPolicy::single(CountLevel::full(), CountLevel::new(1, 2).unwrap()).is_err());
    }

    #[test]
    fn pair_sampling_is_uniform() {
        let policy = PairPolicy::from_levels(&registry()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = std::collections::BTreeMap::new();
        let draws = 15_000;
        for _ in 0..draws {
            let pair = policy.sample(&mut rng);
            *counts.entry(format!("{}->{}", pair.0, pair.1)).or_insert(0u64) += 1;
        }
        assert_eq!(counts.len(), 15);
        let expect = draws as f64 / 15.0;
        let tol = 3.0 * (draws as f64 * (14.0 / 15.0) / 15.0).sqrt();
        for (pair, n) in counts {
            assert!(
                (n as f64 - expect).abs() < tol,
                "pair {pair} drawn {n} times, expected {expect} +- {tol}"
            );
        }
    }

    #[test]
    fn zero_gradient_step_leaves_parameters_unchanged() {
        // With weight decay 0 and target == output, the AdamW step is a
        // no-op on parameters.
        let cfg = tiny_model();
        let mut params = condunet::init::<f32>(&cfg, 5).unwrap();
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..tiny_train(5)
        };
        let mut opt = AdamW::new(&params, &tc, false);
        let x = Array4::<f32>::from_elem((2, 1, 8, 8), 0.3);
        let backend = EmbedderBackend::DeterministicFallback { seed: 0, dim: 16 };
        let table = embedding_table(&backend, &registry(), &PromptTemplate::default()).unwrap();
        let e_in = tile_embedding(&table, registry()[0], 2).unwrap();
        let e_out = tile_embedding(&table, registry()[5], 2).unwrap();
        let y = condunet::forward(&params, &x, &e_in, &e_out).unwrap();

        let before = params.clone();
        let loss = train_step(&mut params, &mut opt, &x, &y, Some((&e_in, &e_out))).unwrap();
        assert_eq!(loss, 0.0);
        for (a, b) in params.tensors().zip(before.tensors()) {
            assert_eq!(a.1, b.1, "tensor {} changed", a.0);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn train_step_loss_traces_are_deterministic() {
        let cfg = tiny_model();
        let backend = EmbedderBackend::DeterministicFallback { seed: 0, dim: 16 };
        let table = embedding_table(&backend, &registry(), &PromptTemplate::default()).unwrap();
        let run = || -> Vec<f64> {
            let mut params = condunet::init::<f32>(&cfg, 5).unwrap();
            let tc = tiny_train(5);
            let mut opt = AdamW::new(&params, &tc, false);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = Array4::<f32>::from_shape_fn((2, 1, 8, 8), |_| rng.random_range(0.0..1.0));
            let t = Array4::<f32>::from_shape_fn((2, 1, 8, 8), |_| rng.random_range(0.0..1.0));
            let e_in = tile_embedding(&table, registry()[0], 2).unwrap();
            let e_out = tile_embedding(&table, registry()[5], 2).unwrap();
            (0..6)
                .map(|_| train_step(&mut params, &mut opt, &x, &t, Some((&e_in, &e_out))).unwrap())
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn repeated_steps_reduce_loss_on_fixed_batch() {
        let cfg = tiny_model();
        let mut params = condunet::init::<f32>(&cfg, 11).unwrap();
        let tc = tiny_train(11);
        let mut opt = AdamW::new(&params, &tc, false);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Array4::<f32>::from_shape_fn((4, 1, 16, 16), |_| rng.random_range(0.0..1.0));
        // Smooth target: denoised-looking constant ramp.
        let t = Array4::<f32>::from_shape_fn((4, 1, 16, 16), |(_, _, i, j)| {
            0.2 + 0.4 * (i as f32 / 16.0) + 0.2 * (j as f32 / 16.0)
        });
        let backend = EmbedderBackend::DeterministicFallback { seed: 0, dim: 16 };
        let table = embedding_table(&backend, &registry(), &PromptTemplate::default()).unwrap();
        let e_in = tile_embedding(&table, registry()[0], 4).unwrap();
        let e_out = tile_embedding(&table, registry()[5], 4).unwrap();

        let first = train_step(&mut params, &mut opt, &x, &t, Some((&e_in, &e_out))).unwrap();
        let mut last = first;
        for _ in 0..120 {
            last = train_step(&mut params, &mut opt, &x, &t, Some((&e_in, &e_out))).unwrap();
        }
        assert!(
            last < 0.1 * first,
            "loss {last} did not drop below 10% of initial {first}"
        );
    }

    #[test]
    fn batch_id_sampling_is_in_range_and_deterministic() {
        let pool: Vec<u64> = (10..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = sample_batch_ids(&pool, 4, &mut rng);
        assert_eq!(a.len(), 4);
        let unique: std::collections::BTreeSet<_> = a.iter().collect();
        assert_eq!(unique.len(), 4, "distinct draws expected when pool suffices");
        for id in &a {
            assert!(pool.contains(id));
        }

        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(a, sample_batch_ids(&pool, 4, &mut rng2));

        let small: Vec<u64> = vec![1, 2];
        let b = sample_batch_ids(&small, 5, &mut rng);
        assert_eq!(b.len(), 5);
    }
}
