//! Representation-aggregation network: an optional attention gate over the
//! feature cube, three cascaded context blocks, and classification plus
//! auxiliary segmentation heads.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, Conv, ConvUnit, Ctx, Dense, UnitOrder};
use crate::local_repr::{encode_patches, stack_patches, Extractor, ExtractorSpec, FeatureCube, Pooling};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, PoolKind, SoftmaxAxis, Tensor, Var};

/// Parameter-name prefix of everything after the feature cube.
pub const CONTEXT_PREFIX: &str = "ra_cnn";
pub const CASCADE_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    B1,
    B2,
    B3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAxis {
    Spatial,
    Channel,
}

impl From<AttentionAxis> for SoftmaxAxis {
    fn from(a: AttentionAxis) -> Self {
        match a {
            AttentionAxis::Spatial => SoftmaxAxis::Spatial,
            AttentionAxis::Channel => SoftmaxAxis::Channel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockWidths {
    pub b1: usize,
    pub b2_squeeze: usize,
    pub b2_expand: usize,
    /// Branches in order: 1×1→3×3→3×3, 1×1, 1×1→3×3, avg3×3→1×1.
    pub b3: [usize; 4],
}

impl Default for BlockWidths {
    fn default() -> Self {
        Self {
            b1: 64,
            b2_squeeze: 16,
            b2_expand: 32,
            b3: [8, 8, 8, 8],
        }
    }
}

impl BlockKind {
    /// Output depth of one block given its input depth.
    pub fn out_depth(self, in_depth: usize, widths: &BlockWidths) -> usize {
        match self {
            BlockKind::B1 => widths.b1,
            BlockKind::B2 => widths.b2_expand + in_depth,
            BlockKind::B3 => widths.b3.iter().sum(),
        }
    }
}

/// Everything needed to rebuild a [`ContextModel`] graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelArch {
    pub extractor: ExtractorSpec,
    pub pooling: Pooling,
    pub attention: bool,
    pub attention_axis: AttentionAxis,
    pub blocks: Vec<BlockKind>,
    pub widths: BlockWidths,
    pub classes: usize,
    pub aux_head: bool,
    pub freeze_extractor_bn: bool,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            extractor: ExtractorSpec::default(),
            pooling: Pooling::Avg,
            attention: false,
            attention_axis: AttentionAxis::Spatial,
            blocks: vec![BlockKind::B3; CASCADE_LEN],
            widths: BlockWidths::default(),
            classes: 4,
            aux_head: false,
            freeze_extractor_bn: false,
        }
    }
}

impl ModelArch {
    pub fn with_kind(mut self, kind: BlockKind) -> Self {
        self.blocks = vec![kind; CASCADE_LEN];
        self
    }

    pub fn block_kind(&self) -> Result<BlockKind> {
        let first = *self
            .blocks
            .first()
            .ok_or_else(|| Error::Config("no context blocks configured".into()))?;
        if self.blocks.len() != CASCADE_LEN {
            return Err(Error::Config(format!(
                "the context cascade has exactly {CASCADE_LEN} blocks, got {}",
                self.blocks.len()
            )));
        }
        if let Some(other) = self.blocks.iter().find(|&&k| k != first) {
            return Err(Error::Config(format!("mixed context block kinds {first:?} and {other:?}")));
        }
        Ok(first)
    }

    /// Depth after each block of the cascade.
    pub fn cascade_depths(&self) -> Result<Vec<usize>> {
        let kind = self.block_kind()?;
        let mut d = self.extractor.feature_depth;
        Ok((0..CASCADE_LEN)
            .map(|_| {
                d = kind.out_depth(d, &self.widths);
                d
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.block_kind()?;
        if self.classes == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        let w = &self.widths;
        if w.b1 == 0 || w.b2_squeeze == 0 || w.b2_expand == 0 || w.b3.contains(&0) {
            return Err(Error::Config("context block widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// 1×1 convolution producing per-value weights, normalised by softmax and
/// multiplied into the cube.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub conv: Conv,
    pub axis: AttentionAxis,
}

impl AttentionGate {
    pub fn new(ps: &mut ParamStore, depth: usize, axis: AttentionAxis, seed: u64) -> Result<Self> {
        let conv = Conv::pointwise(ps, &format!("{CONTEXT_PREFIX}.attention.conv1x1"), depth, depth, seed)?;
        Ok(Self { conv, axis })
    }

    pub fn forward(&self, ctx: &mut Ctx, cube: Var) -> Result<Var> {
        let depth = ctx.graph.shape(cube).get(1).copied().unwrap_or(0);
        if depth != self.conv.in_c {
            return Err(Error::dim(
                "attend",
                format!("gate expects depth {}, cube has depth {depth}", self.conv.in_c),
            ));
        }
        let logits = self.conv.forward(ctx, cube)?;
        let weights = ctx.graph.softmax_map(logits, self.axis.into())?;
        ctx.graph.hadamard(weights, cube)
    }
}

#[derive(Clone, Debug)]
enum BlockLayers {
    B1(ConvUnit),
    B2 {
        squeeze: ConvUnit,
        conv: ConvUnit,
        expand: ConvUnit,
    },
    B3 {
        /// Convolutional branches; the pooled branch is kept separately.
        branches: [Vec<ConvUnit>; 3],
        pool_branch: ConvUnit,
    },
}

#[derive(Clone, Debug)]
pub struct ContextBlock {
    pub kind: BlockKind,
    pub in_depth: usize,
    pub out_depth: usize,
    layers: BlockLayers,
}

fn cbr(ps: &mut ParamStore, name: &str, in_c: usize, out_c: usize, k: usize, seed: u64) -> Result<ConvUnit> {
    let conv = Conv::new(ps, name, in_c, out_c, k, 1, k / 2, seed)?;
    ConvUnit::new(conv, ps, name, Activation::Relu, UnitOrder::NormThenAct, seed)
}

impl ContextBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        kind: BlockKind,
        in_depth: usize,
        widths: &BlockWidths,
        seed: u64,
    ) -> Result<Self> {
        let layers = match kind {
            BlockKind::B1 => {
                let conv = Conv::same3(ps, &format!("{name}.conv3x3"), in_depth, widths.b1, seed)?;
                let n = format!("{name}.conv3x3");
                BlockLayers::B1(ConvUnit::new(conv, ps, &n, Activation::Relu, UnitOrder::ActThenNorm, seed)?)
            }
            BlockKind::B2 => {
                let (s, e) = (widths.b2_squeeze, widths.b2_expand);
                BlockLayers::B2 {
                    squeeze: cbr(ps, &format!("{name}.squeeze1x1"), in_depth, s, 1, seed)?,
                    conv: cbr(ps, &format!("{name}.conv3x3"), s, s, 3, seed)?,
                    expand: cbr(ps, &format!("{name}.expand1x1"), s, e, 1, seed)?,
                }
            }
            BlockKind::B3 => {
                let [w1, w2, w3, w4] = widths.b3;
                BlockLayers::B3 {
                    branches: [
                        vec![
                            cbr(ps, &format!("{name}.branch1.conv1x1"), in_depth, w1, 1, seed)?,
                            cbr(ps, &format!("{name}.branch1.conv3x3a"), w1, w1, 3, seed)?,
                            cbr(ps, &format!("{name}.branch1.conv3x3b"), w1, w1, 3, seed)?,
                        ],
                        vec![cbr(ps, &format!("{name}.branch2.conv1x1"), in_depth, w2, 1, seed)?],
                        vec![
                            cbr(ps, &format!("{name}.branch3.conv1x1"), in_depth, w3, 1, seed)?,
                            cbr(ps, &format!("{name}.branch3.conv3x3"), w3, w3, 3, seed)?,
                        ],
                    ],
                    pool_branch: cbr(ps, &format!("{name}.branch4.conv1x1"), in_depth, w4, 1, seed)?,
                }
            }
        };
        Ok(Self {
            kind,
            in_depth,
            out_depth: kind.out_depth(in_depth, widths),
            layers,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match &self.layers {
            BlockLayers::B1(u) => u.forward(ctx, x),
            BlockLayers::B2 { squeeze, conv, expand } => {
                let y = squeeze.forward(ctx, x)?;
                let y = conv.forward(ctx, y)?;
                let y = expand.forward(ctx, y)?;
                ctx.graph.concat(&[y, x], 1)
            }
            BlockLayers::B3 { branches, pool_branch } => {
                let mut outs = Vec::with_capacity(4);
                for branch in branches {
                    let mut y = x;
                    for u in branch {
                        y = u.forward(ctx, y)?;
                    }
                    outs.push(y);
                }
                let pooled = ctx.graph.pool(x, PoolKind::Avg3x3)?;
                outs.push(pool_branch.forward(ctx, pooled)?);
                ctx.graph.concat(&outs, 1)
            }
        }
    }

    fn units(&self) -> Vec<&ConvUnit> {
        match &self.layers {
            BlockLayers::B1(u) => vec![u],
            BlockLayers::B2 { squeeze, conv, expand } => vec![squeeze, conv, expand],
            BlockLayers::B3 { branches, pool_branch } => {
                let mut v: Vec<&ConvUnit> = branches.iter().flatten().collect();
                v.push(pool_branch);
                v
            }
        }
    }

    /// Multiply-accumulates on an `h×w` cube.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.units().iter().map(|u| u.conv.macs(h, w)).sum()
    }
}

/// Differentiable outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[B, C]` class probabilities.
    pub probs: Var,
    /// `[B, C, M, N]` per-cell probabilities when the auxiliary head is on.
    pub seg: Option<Var>,
    /// The (possibly gated) cube fed to the cascade.
    pub cube: Var,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub class: usize,
    pub seg: Option<Tensor>,
}

/// Extractor plus aggregation network, owning every parameter.
#[derive(Debug)]
pub struct ContextModel {
    pub arch: ModelArch,
    pub params: ParamStore,
    pub extractor: Extractor,
    pub gate: Option<AttentionGate>,
    pub blocks: Vec<ContextBlock>,
    pub cls_head: Dense,
    pub seg_head: Option<Conv>,
    cascade_runs: AtomicUsize,
}

impl Clone for ContextModel {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            params: self.params.clone(),
            extractor: self.extractor.clone(),
            gate: self.gate.clone(),
            blocks: self.blocks.clone(),
            cls_head: self.cls_head.clone(),
            seg_head: self.seg_head.clone(),
            cascade_runs: AtomicUsize::new(self.cascade_count()),
        }
    }
}

impl ContextModel {
    pub fn new(arch: &ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let kind = arch.block_kind()?;
        let mut params = ParamStore::new();
        let mut extractor = Extractor::new(&mut params, &arch.extractor, seed)?;
        extractor.set_frozen_norm(arch.freeze_extractor_bn);
        let d = arch.extractor.feature_depth;
        let gate = if arch.attention {
            Some(AttentionGate::new(&mut params, d, arch.attention_axis, seed)?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(CASCADE_LEN);
        let mut depth = d;
        for i in 0..CASCADE_LEN {
            let b = ContextBlock::new(
                &mut params,
                &format!("{CONTEXT_PREFIX}.block{}", i + 1),
                kind,
                depth,
                &arch.widths,
                seed,
            )?;
            depth = b.out_depth;
            blocks.push(b);
        }
        let cls_head = Dense::new(&mut params, &format!("{CONTEXT_PREFIX}.cls_head"), depth, arch.classes, seed)?;
        let seg_head = if arch.aux_head {
            Some(Conv::pointwise(
                &mut params,
                &format!("{CONTEXT_PREFIX}.seg_head"),
                depth,
                arch.classes,
                seed,
            )?)
        } else {
            None
        };
        Ok(Self {
            arch: arch.clone(),
            params,
            extractor,
            gate,
            blocks,
            cls_head,
            seg_head,
            cascade_runs: AtomicUsize::new(0),
        })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    /// Cubes pushed through the context cascade so far.
    pub fn cascade_count(&self) -> usize {
        self.cascade_runs.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.cascade_runs.store(0, Ordering::Relaxed);
        self.extractor.reset_count();
    }

    /// Everything downstream of the feature cube, on a `[B, d, M, N]` cube.
    pub fn forward_cube(&self, ctx: &mut Ctx, cube: Var) -> Result<Outputs> {
        let shape = ctx.graph.shape(cube).to_vec();
        let d = self.arch.extractor.feature_depth;
        if shape.len() != 4 || shape[1] != d {
            return Err(Error::dim(
                "context_forward",
                format!("expected a [B, {d}, M, N] cube, got {shape:?}"),
            ));
        }
        let gated = match &self.gate {
            Some(g) => g.forward(ctx, cube)?,
            None => cube,
        };
        self.cascade_runs.fetch_add(shape[0], Ordering::Relaxed);
        let mut x = gated;
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        let pooled = ctx.graph.pool(x, PoolKind::GlobalAvg)?;
        let depth = ctx.graph.shape(pooled)[1];
        let flat = ctx.graph.reshape(pooled, &[shape[0], depth])?;
        let logits = self.cls_head.forward(ctx, flat)?;
        let probs = ctx.graph.softmax(logits, 1)?;
        let seg = match &self.seg_head {
            Some(h) => {
                let l = h.forward(ctx, x)?;
                Some(ctx.graph.softmax_map(l, SoftmaxAxis::Channel)?)
            }
            None => None,
        };
        Ok(Outputs { probs, seg, cube: gated })
    }

    /// Encodes a batch of same-sized images and runs the full network.
    pub fn forward_images(&self, ctx: &mut Ctx, images: &[&Tensor]) -> Result<Outputs> {
        let (patches, m, n) = stack_patches(images, self.arch.extractor.patch_size)?;
        let x = ctx.graph.input(patches);
        let cube = encode_patches(ctx, &self.extractor, self.arch.pooling, x, images.len(), m, n)?;
        self.forward_cube(ctx, cube)
    }

    pub fn encode(&self, image: &Tensor, origin: &str) -> Result<FeatureCube> {
        crate::local_repr::encode(image, &self.extractor, &self.params, self.arch.pooling, origin)
    }

    /// Gated cube (eval mode); errors when the model has no gate.
    pub fn attend(&self, cube: &FeatureCube) -> Result<FeatureCube> {
        let gate = self
            .gate
            .as_ref()
            .ok_or_else(|| Error::contract("model has no attention gate"))?;
        let mut ctx = Ctx::eval(&self.params);
        let x = ctx.graph.input(cube.grid.clone());
        let y = gate.forward(&mut ctx, x)?;
        Ok(FeatureCube {
            grid: ctx.graph.value(y).clone(),
            ..cube.clone()
        })
    }

    /// Eval-mode prediction from a `[1, d, M, N]` cube.
    pub fn predict_cube(&self, grid: &Tensor) -> Result<Prediction> {
        let mut ctx = Ctx::eval(&self.params);
        let x = ctx.graph.input(grid.clone());
        let out = self.forward_cube(&mut ctx, x)?;
        let probs = ctx.graph.value(out.probs).data().to_vec();
        Ok(Prediction {
            class: Tensor::argmax(&probs),
            probs,
            seg: out.seg.map(|s| ctx.graph.value(s).clone()),
        })
    }

    pub fn classify(&self, cube: &FeatureCube) -> Result<Vec<f64>> {
        Ok(self.predict_cube(&cube.grid)?.probs)
    }

    pub fn segment(&self, cube: &FeatureCube) -> Result<Tensor> {
        if self.seg_head.is_none() {
            return Err(Error::contract("auxiliary segmentation head is disabled"));
        }
        let p = self.predict_cube(&cube.grid)?;
        Ok(p.seg.expect("segmentation head present"))
    }

    pub fn predict_image(&self, image: &Tensor) -> Result<Prediction> {
        let cube = self.encode(image, "")?;
        self.predict_cube(&cube.grid)
    }

    /// Multiply-accumulates of the network after the cube for one `h×w` window.
    pub fn context_macs(&self, h: usize, w: usize) -> u64 {
        let gate = self.gate.as_ref().map_or(0, |g| g.conv.macs(h, w));
        let blocks: u64 = self.blocks.iter().map(|b| b.macs(h, w)).sum();
        let seg = self.seg_head.as_ref().map_or(0, |s| s.macs(h, w));
        gate + blocks + self.cls_head.macs() + seg
    }

    /// Writes `<path>` (tensors) and `<path>.json` (architecture).
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(BufWriter::new(f), &self.params.named_tensors()).map_err(|e| Error::io(path, e))?;
        let arch_path = arch_path(path);
        let json = serde_json::to_string_pretty(&self.arch)?;
        std::fs::write(&arch_path, json).map_err(|e| Error::io(&arch_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arch_path = arch_path(path);
        for p in [path, arch_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingFile(p.to_path_buf()));
            }
        }
        let text = std::fs::read_to_string(&arch_path).map_err(|e| Error::io(&arch_path, e))?;
        let arch: ModelArch = serde_json::from_str(&text)?;
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let entries = read_checkpoint(BufReader::new(f))?;
        let mut model = Self::new(&arch, 0)?;
        model.params.load_named(&entries)?;
        Ok(model)
    }
}

pub fn arch_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
