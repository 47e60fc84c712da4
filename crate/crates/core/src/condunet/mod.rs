//! Conditional U-Net with dual embedding gates.
//!
//! Encoder stages run [conv-norm-SiLU x blocks, gate(input embedding)] and
//! downsample between levels; the deepest stage is the bottleneck and is
//! gated like an encoder stage. Decoder stages run [nearest upsample + conv,
//! skip concatenation, conv-norm-SiLU x blocks, gate(output embedding)].
//! Gates start at identity (weight 0, bias 1), so an untrained conditional
//! model is bit-exactly the plain backbone.

pub mod ops;

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayD, ArrayView1, Axis, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::countsim::{CountLevel, ImageSlice};
use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};
use ops::fl;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub conv_kernel: usize,
    pub blocks_per_level: usize,
    pub embedding_dim: usize,
    pub groups_for_norm: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 8],
            conv_kernel: 3,
            blocks_per_level: 2,
            embedding_dim: 512,
            groups_for_norm: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth {} must be at least 2", self.depth)));
        }
        if self.channel_multipliers.len() != self.depth {
            return Err(Error::Config(format!(
                "channel_multipliers has {} entries, expected depth {}",
                self.channel_multipliers.len(),
                self.depth
            )));
        }
        if self.conv_kernel != 3 {
            return Err(Error::Config(format!(
                "conv_kernel {} unsupported; the architecture uses 3",
                self.conv_kernel
            )));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::Config("blocks_per_level must be at least 1".to_string()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".to_string()));
        }
        for (i, &m) in self.channel_multipliers.iter().enumerate() {
            if m == 0 {
                return Err(Error::Config(format!("channel multiplier {i} must be positive")));
            }
            let ch = self.base_channels * m;
            if self.groups_for_norm == 0 || !ch.is_multiple_of(self.groups_for_norm) {
                return Err(Error::Config(format!(
                    "channels {ch} at level {i} not divisible by groups_for_norm {}",
                    self.groups_for_norm
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Spatial divisor required of inputs: 2^(depth-1).
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// One gate: per-channel multipliers g = bias + weight . embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    conv: ConvIdx,
    norm: NormIdx,
}

#[derive(Debug, Clone)]
struct StageIdx {
    up: Option<ConvIdx>,
    blocks: Vec<BlockIdx>,
    gate_w: usize,
    gate_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<StageIdx>,
    dec: Vec<StageIdx>,
    head: ConvIdx,
}

/// Named, ordered parameter collection plus its architecture config.
#[derive(Debug, Clone)]
pub struct ModelParameters<F: NdFloat> {
    pub config: ModelConfig,
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    layout: Layout,
}

enum TensorKind {
    ConvWeight { fan_in: usize },
    ConvBias,
    NormGamma,
    NormBeta,
    GateWeight,
    GateBias,
}

fn build_plan(config: &ModelConfig) -> (Vec<(String, Vec<usize>, TensorKind)>, Layout) {
    let mut plan: Vec<(String, Vec<usize>, TensorKind)> = Vec::new();
    let k = config.conv_kernel;
    let d = config.embedding_dim;

    let push_conv = |plan: &mut Vec<_>, name: &str, c_out: usize, c_in: usize, k: usize| {
        let w = plan.len();
        plan.push((
            format!("{name}.weight"),
            vec![c_out, c_in, k, k],
            TensorKind::ConvWeight { fan_in: c_in * k * k },
        ));
        plan.push((format!("{name}.bias"), vec![c_out], TensorKind::ConvBias));
        ConvIdx { w, b: w + 1 }
    };
    let push_norm = |plan: &mut Vec<(String, Vec<usize>, TensorKind)>, name: &str, c: usize| {
        let g = plan.len();
        plan.push((format!("{name}.gamma"), vec![c], TensorKind::NormGamma));
        plan.push((format!("{name}.beta"), vec![c], TensorKind::NormBeta));
        NormIdx { g, b: g + 1 }
    };
    let push_gate = |plan: &mut Vec<(String, Vec<usize>, TensorKind)>, name: &str, c: usize| {
        let w = plan.len();
        plan.push((format!("{name}.weight"), vec![c, d], TensorKind::GateWeight));
        plan.push((format!("{name}.bias"), vec![c], TensorKind::GateBias));
        (w, w + 1)
    };

    let mut enc = Vec::new();
    for i in 0..config.depth {
        let ch = config.channels(i);
        let ch_in = if i == 0 { 1 } else { config.channels(i - 1) };
        let mut blocks = Vec::new();
        for j in 0..config.blocks_per_level {
            let prefix = format!("enc{i}.block{}", j + 1);
            let c_in = if j == 0 { ch_in } else { ch };
            let conv = push_conv(&mut plan, &format!("{prefix}.conv"), ch, c_in, k);
            let norm = push_norm(&mut plan, &format!("{prefix}.norm"), ch);
            blocks.push(BlockIdx { conv, norm });
        }
        let (gate_w, gate_b) = push_gate(&mut plan, &format!("enc{i}.gate"), ch);
        enc.push(StageIdx {
            up: None,
            blocks,
            gate_w,
            gate_b,
        });
    }

    // Decoder stages in execution order: deepest (depth-2) first.
    let mut dec_by_exec = Vec::new();
    for i in (0..config.depth - 1).rev() {
        let ch = config.channels(i);
        let ch_above = config.channels(i + 1);
        let up = push_conv(&mut plan, &format!("dec{i}.up"), ch, ch_above, k);
        let mut blocks = Vec::new();
        for j in 0..config.blocks_per_level {
            let prefix = format!("dec{i}.block{}", j + 1);
            let c_in = if j == 0 { 2 * ch } else { ch };
            let conv = push_conv(&mut plan, &format!("{prefix}.conv"), ch, c_in, k);
            let norm = push_norm(&mut plan, &format!("{prefix}.norm"), ch);
            blocks.push(BlockIdx { conv, norm });
        }
        let (gate_w, gate_b) = push_gate(&mut plan, &format!("dec{i}.gate"), ch);
        dec_by_exec.push(StageIdx {
            up: Some(up),
            blocks,
            gate_w,
            gate_b,
        });
    }

    let head = push_conv(&mut plan, "head", 1, config.channels(0), 1);

    (
        plan,
        Layout {
            enc,
            dec: dec_by_exec,
            head,
        },
    )
}

/// Initialize parameters: fan-in-scaled uniform conv weights, zero conv
/// biases, unit norm gains, and identity gates (weight 0, bias 1).
pub fn init<F: NdFloat>(config: &ModelConfig, seed: u64) -> Result<ModelParameters<F>> {
    config.validate()?;
    let (plan, layout) = build_plan(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(plan.len());
    let mut values = Vec::with_capacity(plan.len());
    for (name, shape, kind) in plan {
        let n: usize = shape.iter().product();
        let value = match kind {
            TensorKind::ConvWeight { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<F> = (0..n)
                    .map(|_| fl(rng.random_range(-bound..bound)))
                    .collect();
                ArrayD::from_shape_vec(shape.as_slice(), data).unwrap()
            }
            TensorKind::ConvBias | TensorKind::NormBeta | TensorKind::GateWeight => {
                ArrayD::zeros(shape.as_slice())
            }
            TensorKind::NormGamma | TensorKind::GateBias => {
                ArrayD::from_elem(shape.as_slice(), F::one())
            }
        };
        names.push(name);
        values.push(value);
    }
    Ok(ModelParameters {
        config: config.clone(),
        names,
        values,
        layout,
    })
}

impl<F: NdFloat> ModelParameters<F> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn value(&self, idx: usize) -> &ArrayD<F> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<F> {
        &mut self.values[idx]
    }

    pub fn n_tensors(&self) -> usize {
        self.values.len()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replace all tensors, checking names and shapes. Used by checkpoint
    /// loading.
    pub fn load_tensors(&mut self, tensors: &[(String, ArrayD<F>)]) -> Result<()> {
        for (name, value) in tensors {
            let idx = self.index_of(name).ok_or_else(|| {
                Error::Shape(format!("checkpoint tensor {name} not in architecture"))
            })?;
            if self.values[idx].shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    self.values[idx].shape()
                )));
            }
            self.values[idx] = value.clone();
        }
        Ok(())
    }

    /// Names of the gate-free backbone subset.
    pub fn backbone_names(&self) -> Vec<&str> {
        self.names
            .iter()
            .filter(|n| !n.contains(".gate."))
            .map(|s| s.as_str())
            .collect()
    }

    pub fn is_gate(&self, idx: usize) -> bool {
        self.names[idx].contains(".gate.")
    }

    fn conv_wb(&self, idx: ConvIdx) -> (Array4<F>, ArrayView1<'_, F>) {
        let w = self.values[idx.w]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned();
        let b = self.values[idx.b]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        (w, b)
    }
}

fn view1<F: NdFloat>(a: &ArrayD<F>) -> ArrayView1<'_, F> {
    a.view().into_dimensionality::<ndarray::Ix1>().unwrap()
}

fn view2<F: NdFloat>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<ndarray::Ix2>().unwrap()
}

fn view4<F: NdFloat>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<ndarray::Ix4>().unwrap()
}

struct BlockTape<F> {
    conv_in: Array3<F>,
    norm: ops::GroupNormCache<F>,
    silu_in: Array3<F>,
}

struct StageTape<F> {
    up_in: Option<Array3<F>>,
    blocks: Vec<BlockTape<F>>,
    gate_in: Option<Array3<F>>,
    gate_g: Option<Array1<F>>,
}

pub(crate) struct SampleTape<F> {
    enc: Vec<StageTape<F>>,
    dec: Vec<StageTape<F>>,
    head_in: Array3<F>,
}

fn run_block<F: NdFloat>(
    params: &ModelParameters<F>,
    block: BlockIdx,
    x: Array3<F>,
    record: bool,
    tapes: &mut Vec<BlockTape<F>>,
) -> Array3<F> {
    let w = view4(&params.values[block.conv.w]);
    let b = view1(&params.values[block.conv.b]);
    let conv_out = ops::conv2d_forward(&x, &w.to_owned(), &b.to_owned());
    let gamma = view1(&params.values[block.norm.g]).to_owned();
    let beta = view1(&params.values[block.norm.b]).to_owned();
    let (norm_out, cache) = ops::groupnorm_forward(&conv_out, &gamma, &beta, params.config.groups_for_norm);
    let y = ops::silu_forward(&norm_out);
    if record {
        tapes.push(BlockTape {
            conv_in: x,
            norm: cache,
            silu_in: norm_out,
        });
    }
    y
}

fn stage_gate<F: NdFloat>(
    params: &ModelParameters<F>,
    stage: &StageIdx,
    x: Array3<F>,
    emb: &ArrayView1<F>,
    record: bool,
) -> (Array3<F>, Option<Array3<F>>, Option<Array1<F>>) {
    let w = view2(&params.values[stage.gate_w]);
    let b = view1(&params.values[stage.gate_b]);
    let g = ops::gate_multipliers(&w.to_owned(), &b.to_owned(), emb);
    let y = ops::gate_forward(&x, &g);
    if record {
        (y, Some(x), Some(g))
    } else {
        (y, None, None)
    }
}

fn forward_sample<F: NdFloat>(
    params: &ModelParameters<F>,
    x: Array3<F>,
    emb_in: Option<&ArrayView1<F>>,
    emb_out: Option<&ArrayView1<F>>,
    record: bool,
) -> (Array3<F>, Option<SampleTape<F>>) {
    let cfg = &params.config;
    let depth = cfg.depth;
    let mut h = x;
    let mut skips: Vec<Array3<F>> = Vec::with_capacity(depth - 1);
    let mut enc_tapes = Vec::new();
    let mut dec_tapes = Vec::new();

    for (i, stage) in params.layout.enc.iter().enumerate() {
        let mut blocks = Vec::new();
        for &block in &stage.blocks {
            h = run_block(params, block, h, record, &mut blocks);
        }
        let (gated, gate_in, gate_g) = match emb_in {
            Some(e) => stage_gate(params, stage, h, e, record),
            None => (h, None, None),
        };
        h = gated;
        enc_tapes.push(StageTape {
            up_in: None,
            blocks,
            gate_in,
            gate_g,
        });
        if i < depth - 1 {
            skips.push(h.clone());
            h = ops::avgpool2_forward(&h);
        }
    }

    for (exec, stage) in params.layout.dec.iter().enumerate() {
        let level = depth - 2 - exec;
        let up = ops::upsample2_forward(&h);
        let idx = stage.up.unwrap();
        let (w, b) = params.conv_wb(idx);
        let up_conv = ops::conv2d_forward(&up, &w, &b.to_owned());
        let skip = &skips[level];
        let mut cat = concatenate(Axis(0), &[up_conv.view(), skip.view()]).unwrap();
        let mut blocks = Vec::new();
        for &block in &stage.blocks {
            cat = run_block(params, block, cat, record, &mut blocks);
        }
        let (gated, gate_in, gate_g) = match emb_out {
            Some(e) => stage_gate(params, stage, cat, e, record),
            None => (cat, None, None),
        };
        h = gated;
        dec_tapes.push(StageTape {
            up_in: if record { Some(up) } else { None },
            blocks,
            gate_in,
            gate_g,
        });
    }

    let (w, b) = params.conv_wb(params.layout.head);
    let y = ops::conv2d_forward(&h, &w, &b.to_owned());
    let tape = if record {
        Some(SampleTape {
            enc: enc_tapes,
            dec: dec_tapes,
            head_in: h,
        })
    } else {
        None
    };
    (y, tape)
}

fn backward_block<F: NdFloat>(
    params: &ModelParameters<F>,
    block: BlockIdx,
    tape: &BlockTape<F>,
    dy: Array3<F>,
    grads: &mut [ArrayD<F>],
) -> Array3<F> {
    let d_norm_out = ops::silu_backward(&tape.silu_in, &dy);
    let gamma = view1(&params.values[block.norm.g]).to_owned();
    let (d_conv_out, dgamma, dbeta) =
        ops::groupnorm_backward(&tape.norm, &gamma, params.config.groups_for_norm, &d_norm_out);
    grads[block.norm.g]
        .zip_mut_with(&dgamma.into_dyn(), |a, &b| *a += b);
    grads[block.norm.b]
        .zip_mut_with(&dbeta.into_dyn(), |a, &b| *a += b);
    let w = view4(&params.values[block.conv.w]).to_owned();
    let (dx, dw, db) = ops::conv2d_backward(&tape.conv_in, &w, &d_conv_out);
    grads[block.conv.w].zip_mut_with(&dw.into_dyn(), |a, &b| *a += b);
    grads[block.conv.b].zip_mut_with(&db.into_dyn(), |a, &b| *a += b);
    dx
}

fn backward_gate<F: NdFloat>(
    stage: &StageIdx,
    tape: &StageTape<F>,
    emb: &ArrayView1<F>,
    dy: Array3<F>,
    grads: &mut [ArrayD<F>],
) -> Array3<F> {
    let (gate_in, g) = match (&tape.gate_in, &tape.gate_g) {
        (Some(x), Some(g)) => (x, g),
        _ => return dy,
    };
    let (dx, dg) = ops::gate_backward(gate_in, g, &dy);
    // dW[c, d] = dg[c] * e[d]; dbias[c] = dg[c].
    {
        let mut gw = grads[stage.gate_w]
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for (c, &dgc) in dg.iter().enumerate() {
            let mut row = gw.slice_mut(s![c, ..]);
            row.zip_mut_with(emb, |a, &e| *a += dgc * e);
        }
    }
    grads[stage.gate_b].zip_mut_with(&dg.into_dyn(), |a, &b| *a += b);
    dx
}

fn backward_sample<F: NdFloat>(
    params: &ModelParameters<F>,
    tape: &SampleTape<F>,
    emb_in: Option<&ArrayView1<F>>,
    emb_out: Option<&ArrayView1<F>>,
    dy: &Array3<F>,
    grads: &mut [ArrayD<F>],
) {
    let cfg = &params.config;
    let depth = cfg.depth;

    let head = params.layout.head;
    let w = view4(&params.values[head.w]).to_owned();
    let (mut dh, dw, db) = ops::conv2d_backward(&tape.head_in, &w, dy);
    grads[head.w].zip_mut_with(&dw.into_dyn(), |a, &b| *a += b);
    grads[head.b].zip_mut_with(&db.into_dyn(), |a, &b| *a += b);

    let mut d_skips: Vec<Option<Array3<F>>> = vec![None; depth - 1];

    for (exec, stage) in params.layout.dec.iter().enumerate().rev() {
        let level = depth - 2 - exec;
        let stage_tape = &tape.dec[exec];
        if let Some(e) = emb_out {
            dh = backward_gate(stage, stage_tape, e, dh, grads);
        }
        for (j, &block) in stage.blocks.iter().enumerate().rev() {
            dh = backward_block(params, block, &stage_tape.blocks[j], dh, grads);
        }
        let ch = cfg.channels(level);
        let d_up_conv = dh.slice(s![0..ch, .., ..]).to_owned();
        let d_skip = dh.slice(s![ch..2 * ch, .., ..]).to_owned();
        d_skips[level] = Some(d_skip);
        let idx = stage.up.unwrap();
        let w = view4(&params.values[idx.w]).to_owned();
        let up_in = stage_tape.up_in.as_ref().expect("decoder tape records upsample input");
        let (d_up, dw, db) = ops::conv2d_backward(up_in, &w, &d_up_conv);
        grads[idx.w].zip_mut_with(&dw.into_dyn(), |a, &b| *a += b);
        grads[idx.b].zip_mut_with(&db.into_dyn(), |a, &b| *a += b);
        dh = ops::upsample2_backward(&d_up);
    }

    for (i, stage) in params.layout.enc.iter().enumerate().rev() {
        let stage_tape = &tape.enc[i];
        if i < depth - 1 {
            let gated = stage_tape
                .gate_in
                .as_ref()
                .map(|x| x.dim())
                .unwrap_or_else(|| stage_tape.blocks.last().unwrap().silu_in.dim());
            let (_, h, w) = gated;
            let mut d = ops::avgpool2_backward(&dh, h, w);
            if let Some(ds) = d_skips[i].take() {
                d.zip_mut_with(&ds, |a, &b| *a += b);
            }
            dh = d;
        }
        if let Some(e) = emb_in {
            dh = backward_gate(stage, stage_tape, e, dh, grads);
        }
        for (j, &block) in stage.blocks.iter().enumerate().rev() {
            dh = backward_block(params, block, &stage_tape.blocks[j], dh, grads);
        }
    }
}

fn check_batch_shapes<F: NdFloat>(
    params: &ModelParameters<F>,
    batch: &Array4<F>,
    embs: &[&Array2<F>],
) -> Result<()> {
    let (b, c, h, w) = batch.dim();
    if c != 1 {
        return Err(Error::Shape(format!("input must have 1 channel, got {c}")));
    }
    let div = params.config.spatial_divisor();
    if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "spatial size {h}x{w} not divisible by 2^(depth-1) = {div}"
        )));
    }
    for e in embs {
        let (eb, ed) = e.dim();
        if eb != b {
            return Err(Error::Shape(format!(
                "embedding batch {eb} does not match input batch {b}"
            )));
        }
        if ed != params.config.embedding_dim {
            return Err(Error::Shape(format!(
                "embedding dimension {ed} does not match model D = {}",
                params.config.embedding_dim
            )));
        }
    }
    Ok(())
}

/// Standalone gate op on a batch: output[b,c,h,w] = (bias + W e_b)[c] * x.
pub fn gate<F: NdFloat>(
    features: &Array4<F>,
    embedding: &Array2<F>,
    params: &GateParams<F>,
) -> Result<Array4<F>> {
    let (b, c, _, _) = features.dim();
    let (eb, ed) = embedding.dim();
    let (gc, gd) = params.weight.dim();
    if eb != b || gc != c || gd != ed || params.bias.len() != c {
        return Err(Error::Shape(format!(
            "gate shapes inconsistent: features {:?}, embedding {:?}, weight {:?}, bias {:?}",
            features.dim(),
            embedding.dim(),
            params.weight.dim(),
            params.bias.dim()
        )));
    }
    let mut out = features.clone();
    for bi in 0..b {
        let e = embedding.row(bi);
        let g = ops::gate_multipliers(&params.weight, &params.bias, &e);
        for (ci, &gc) in g.iter().enumerate() {
            out.slice_mut(s![bi, ci, .., ..]).mapv_inplace(|v| v * gc);
        }
    }
    Ok(out)
}

/// Conditional forward pass over a batch.
pub fn forward<F: NdFloat>(
    params: &ModelParameters<F>,
    batch: &Array4<F>,
    emb_in: &Array2<F>,
    emb_out: &Array2<F>,
) -> Result<Array4<F>> {
    check_batch_shapes(params, batch, &[emb_in, emb_out])?;
    let (b, _, h, w) = batch.dim();
    let mut out = Array4::<F>::zeros((b, 1, h, w));
    for bi in 0..b {
        let x = batch.slice(s![bi, .., .., ..]).to_owned();
        let (y, _) = forward_sample(
            params,
            x,
            Some(&emb_in.row(bi)),
            Some(&emb_out.row(bi)),
            false,
        );
        out.slice_mut(s![bi, .., .., ..]).assign(&y);
    }
    Ok(out)
}

/// Gate-free backbone forward (the plain U-Net path).
pub fn forward_backbone<F: NdFloat>(params: &ModelParameters<F>, batch: &Array4<F>) -> Result<Array4<F>> {
    check_batch_shapes(params, batch, &[])?;
    let (b, _, h, w) = batch.dim();
    let mut out = Array4::<F>::zeros((b, 1, h, w));
    for bi in 0..b {
        let x = batch.slice(s![bi, .., .., ..]).to_owned();
        let (y, _) = forward_sample(params, x, None, None, false);
        out.slice_mut(s![bi, .., .., ..]).assign(&y);
    }
    Ok(out)
}

/// Forward one sample recording the tape needed for `backward_one`.
pub(crate) fn forward_one<F: NdFloat>(
    params: &ModelParameters<F>,
    x: Array3<F>,
    emb_in: Option<&ArrayView1<F>>,
    emb_out: Option<&ArrayView1<F>>,
) -> (Array3<F>, SampleTape<F>) {
    let (y, tape) = forward_sample(params, x, emb_in, emb_out, true);
    (y, tape.expect("tape recorded"))
}

/// Accumulate gradients for one sample into `grads`.
pub(crate) fn backward_one<F: NdFloat>(
    params: &ModelParameters<F>,
    tape: &SampleTape<F>,
    emb_in: Option<&ArrayView1<F>>,
    emb_out: Option<&ArrayView1<F>>,
    dy: &Array3<F>,
    grads: &mut [ArrayD<F>],
) {
    backward_sample(params, tape, emb_in, emb_out, dy, grads)
}

pub fn zero_grads<F: NdFloat>(params: &ModelParameters<F>) -> Vec<ArrayD<F>> {
    params
        .values
        .iter()
        .map(|v| ArrayD::zeros(v.shape()))
        .collect()
}

/// Mean squared output of one sample and its gradient w.r.t. every
/// parameter tensor. Gradient-check hook; training goes through the
/// batched step in `trainer`.
pub fn output_energy_gradients<F: NdFloat>(
    params: &ModelParameters<F>,
    x: Array3<F>,
    emb_in: Option<&ArrayView1<F>>,
    emb_out: Option<&ArrayView1<F>>,
) -> (F, Vec<ArrayD<F>>) {
    let (y, tape) = forward_sample(params, x, emb_in, emb_out, true);
    let tape = tape.expect("tape recorded");
    let numel = fl::<F>(y.len() as f64);
    let loss = y.mapv(|v| v * v).sum() / numel;
    let two = fl::<F>(2.0);
    let dy = y.mapv(|v| two * v / numel);
    let mut grads = zero_grads(params);
    backward_sample(params, &tape, emb_in, emb_out, &dy, &mut grads);
    (loss, grads)
}

/// Count-conditioned denoising of one normalized slice. The output count
/// level must strictly exceed the input level; negative intensities are
/// clamped at delivery.
pub fn denoise(
    params: &ModelParameters<f32>,
    slice: &ImageSlice,
    level_in: CountLevel,
    level_out: CountLevel,
    table: &EmbeddingTable,
    gated: bool,
) -> Result<ImageSlice> {
    if level_in >= level_out {
        return Err(Error::Constraint(format!(
            "output count level {level_out} must exceed input level {level_in}"
        )));
    }
    let (h, w) = slice.intensity.dim();
    let mut batch = Array4::<f32>::zeros((1, 1, h, w));
    batch.slice_mut(s![0, 0, .., ..]).assign(&slice.intensity);
    let out = if gated {
        let e_in = table.get(level_in)?.vector.clone();
        let e_out = table.get(level_out)?.vector.clone();
        let emb_in = e_in.insert_axis(Axis(0));
        let emb_out = e_out.insert_axis(Axis(0));
        forward(params, &batch, &emb_in, &emb_out)?
    } else {
        forward_backbone(params, &batch)?
    };
    let intensity = out
        .slice(s![0, 0, .., ..])
        .mapv(|v| if v > 0.0 { v } else { 0.0 });
    Ok(ImageSlice {
        intensity,
        level: level_out,
        scale: slice.scale,
    })
}

/// Mean squared error and its gradient w.r.t. the prediction.
pub fn mse_and_grad<F: NdFloat>(pred: &Array3<F>, target: &Array3<F>, batch: usize) -> (F, Array3<F>) {
    let numel = fl::<F>((pred.len() * batch) as f64);
    let diff = pred - target;
    let loss = diff.mapv(|v| v * v).sum() / numel;
    let two = fl::<F>(2.0);
    let grad = diff.mapv(|v| two * v / numel);
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countsim::registry;
    use crate::embedder::{embedding_table, EmbedderBackend, PromptTemplate};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            conv_kernel: 3,
            blocks_per_level: 2,
            embedding_dim: 8,
            groups_for_norm: 2,
        }
    }

    fn rand_batch(seed: u64, b: usize, h: usize, w: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, 1, h, w), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_emb(seed: u64, b: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let c = ModelConfig { depth: 1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { channel_multipliers: vec![1, 2], ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { groups_for_norm: 7, ..Default::default() };
        assert!(c.validate().is_err());
        assert!(init::<f32>(&c, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_with_identity_gates() {
        let cfg = tiny_config();
        let a = init::<f32>(&cfg, 42).unwrap();
        let b = init::<f32>(&cfg, 42).unwrap();
        assert_eq!(a.names, b.names);
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert_eq!(x, y);
        }
        for (name, value) in a.tensors() {
            if name.contains(".gate.weight") {
                assert!(value.iter().all(|&v| v == 0.0), "{name} not zero");
            }
            if name.contains(".gate.bias") {
                assert!(value.iter().all(|&v| v == 1.0), "{name} not one");
            }
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = tiny_config();
        let params = init::<f32>(&cfg, 0).unwrap();
        // Hand count for depth 2, base 4, multipliers [1,2], D=8, k=3:
        // enc0: conv(4,1) 36+4, norm 8, conv(4,4) 144+4, norm 8, gate 4*8+4
        // enc1: conv(8,4) 288+8, norm 16, conv(8,8) 576+8, norm 16, gate 8*8+8
        // dec0: up conv(4,8) 288+4, conv(4,8) 288+4, norm 8, conv(4,4) 144+4,
        //       norm 8, gate 4*8+4
        // head: conv1x1(1,4) 4+1
        let enc0 = 36 + 4 + 8 + 144 + 4 + 8 + 32 + 4;
        let enc1 = 288 + 8 + 16 + 576 + 8 + 16 + 64 + 8;
        let dec0 = 288 + 4 + 288 + 4 + 8 + 144 + 4 + 8 + 32 + 4;
        let head = 5;
        assert_eq!(params.param_count(), enc0 + enc1 + dec0 + head);
    }

    #[test]
    fn gate_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-1.0_f32..1.0));
        let e = Array2::from_shape_fn((2, 5), |_| rng.random_range(-1.0_f32..1.0));
        let identity = GateParams {
            weight: Array2::zeros((3, 5)),
            bias: Array1::ones(3),
        };
        assert_eq!(gate(&x, &e, &identity).unwrap(), x);

        let zero = GateParams {
            weight: Array2::zeros((3, 5)),
            bias: Array1::zeros(3),
        };
        assert!(gate(&x, &e, &zero).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_hand_example() {
        // C=2, D=2, weight = I, bias = 0, embedding = (2,3): channel scales
        // 2 and 3.
        let x = Array4::<f64>::ones((1, 2, 2, 2));
        let e = Array2::from_shape_vec((1, 2), vec![2.0, 3.0]).unwrap();
        let params = GateParams {
            weight: Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Array1::zeros(2),
        };
        let y = gate(&x, &e, &params).unwrap();
        assert!(y.slice(s![0, 0, .., ..]).iter().all(|&v| v == 2.0));
        assert!(y.slice(s![0, 1, .., ..]).iter().all(|&v| v == 3.0));

        let bad = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        assert!(gate(&x, &bad, &params).is_err());
    }

    #[test]
    fn forward_preserves_shape() {
        let cfg = ModelConfig {
            depth: 4,
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4, 8],
            conv_kernel: 3,
            blocks_per_level: 2,
            embedding_dim: 16,
            groups_for_norm: 8,
        };
        let params = init::<f32>(&cfg, 3).unwrap();
        let x = Array4::<f32>::ones((2, 1, 64, 64));
        let e = Array2::<f32>::ones((2, 16));
        let y = forward(&params, &x, &e, &e).unwrap();
        assert_eq!(y.dim(), (2, 1, 64, 64));
    }

    #[test]
    fn indivisible_input_and_bad_embedding_are_shape_errors() {
        let params = init::<f32>(&tiny_config(), 0).unwrap();
        let x = Array4::<f32>::ones((1, 1, 9, 8));
        let e = Array2::<f32>::ones((1, 8));
        assert!(matches!(forward(&params, &x, &e, &e), Err(Error::Shape(_))));

        let x = Array4::<f32>::ones((1, 1, 8, 8));
        let bad = Array2::<f32>::ones((1, 4));
        assert!(matches!(forward(&params, &x, &bad, &e), Err(Error::Shape(_))));
        let bad_b = Array2::<f32>::ones((2, 8));
        assert!(matches!(forward(&params, &x, &bad_b, &e), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_gates_ignore_embeddings_and_match_backbone() {
        let params = init::<f32>(&tiny_config(), 9).unwrap();
        let x = rand_batch(4, 2, 8, 8).mapv(|v| v as f32);
        let e1 = rand_emb(5, 2, 8).mapv(|v| v as f32);
        let e2 = rand_emb(6, 2, 8).mapv(|v| v as f32);
        let e3 = rand_emb(7, 2, 8).mapv(|v| v as f32);
        let y1 = forward(&params, &x, &e1, &e2).unwrap();
        let y2 = forward(&params, &x, &e3, &e1).unwrap();
        let backbone = forward_backbone(&params, &x).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(y1, backbone);
    }

    #[test]
    fn forward_is_deterministic() {
        let params = init::<f32>(&tiny_config(), 1).unwrap();
        let x = rand_batch(2, 1, 8, 8).mapv(|v| v as f32);
        let e = rand_emb(3, 1, 8).mapv(|v| v as f32);
        let a = forward(&params, &x, &e, &e).unwrap();
        let b = forward(&params, &x, &e, &e).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nonzero_gates_respond_to_embeddings() {
        let mut params = init::<f32>(&tiny_config(), 2).unwrap();
        let idx = params.index_of("enc0.gate.weight").unwrap();
        params.value_mut(idx).mapv_inplace(|_| 0.05);
        let x = rand_batch(8, 1, 8, 8).mapv(|v| v as f32);
        let e1 = rand_emb(9, 1, 8).mapv(|v| v as f32);
        let e2 = rand_emb(10, 1, 8).mapv(|v| v as f32);
        let y1 = forward(&params, &x, &e1, &e1).unwrap();
        let y2 = forward(&params, &x, &e2, &e1).unwrap();
        assert_ne!(y1, y2);
    }

    /// Central-difference check of d mean(y^2) / d theta for a sample of
    /// parameters in every tensor group.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut params = init::<f64>(&cfg, 7).unwrap();
        // Move gates off identity so their input branch is exercised.
        for i in 0..params.n_tensors() {
            if params.names()[i].contains(".gate.weight") {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
                params.value_mut(i).mapv_inplace(|_| rng.random_range(-0.2..0.2));
            }
        }
        let x = rand_batch(11, 1, 8, 8);
        let e_in = rand_emb(12, 1, 8);
        let e_out = rand_emb(13, 1, 8);

        let loss_of = |p: &ModelParameters<f64>| -> f64 {
            let y = forward(p, &x, &e_in, &e_out).unwrap();
            y.mapv(|v| v * v).sum() / y.len() as f64
        };

        let x0 = x.slice(s![0, .., .., ..]).to_owned();
        let (_, grads) =
            output_energy_gradients(&params, x0, Some(&e_in.row(0)), Some(&e_out.row(0)));

        let step = 1e-5;
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        let n_tensors = params.n_tensors();
        #[allow(clippy::needless_range_loop)] // t indexes params and grads in lockstep
        for t in 0..n_tensors {
            let len = params.value(t).len();
            let probe = [0, len / 2, len.saturating_sub(1)];
            for &flat in probe.iter().take(if len > 1 { 2 } else { 1 }) {
                let orig = params.value(t).as_slice().unwrap()[flat];
                params.value_mut(t).as_slice_mut().unwrap()[flat] = orig + step;
                let plus = loss_of(&params);
                params.value_mut(t).as_slice_mut().unwrap()[flat] = orig - step;
                let minus = loss_of(&params);
                params.value_mut(t).as_slice_mut().unwrap()[flat] = orig;
                let fd = (plus - minus) / (2.0 * step);
                let an = grads[t].as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs());
                if denom > 1e-10 {
                    worst = worst.max((fd - an).abs() / denom);
                }
                checked += 1;
            }
        }
        assert!(checked >= 20, "only {checked} parameters probed");
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn denoise_respects_level_constraint_and_clamps() {
        let cfg = tiny_config();
        let params = init::<f32>(&cfg, 0).unwrap();
        let backend = EmbedderBackend::DeterministicFallback { seed: 1, dim: 8 };
        let table = embedding_table(&backend, &registry(), &PromptTemplate::default()).unwrap();
        let levels = registry();
        let slice = ImageSlice {
            intensity: Array2::from_elem((8, 8), 0.5),
            level: levels[0],
            scale: 1.0,
        };
        let out = denoise(&params, &slice, levels[0], levels[5], &table, true).unwrap();
        assert_eq!(out.level, levels[5]);
        assert!(out.intensity.iter().all(|&v| v >= 0.0));
        assert_eq!(out.intensity.dim(), (8, 8));

        let err = denoise(&params, &slice, levels[4], levels[3], &table, true).unwrap_err();
        assert!(matches!(err, Error::Constraint(_)));
        let err = denoise(&params, &slice, levels[3], levels[3], &table, true).unwrap_err();
        assert!(matches!(err, Error::Constraint(_)));

        let missing = CountLevel::new(1, 7).unwrap();
        assert!(denoise(&params, &slice, missing, levels[5], &table, true).is_err());
    }
}
