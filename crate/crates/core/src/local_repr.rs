//! Local representation: tile an image into a patch grid, run a patch
//! extractor on every patch, pool, and lay the vectors out as a feature cube.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, Conv, ConvUnit, Ctx, Dense, UnitOrder};
use crate::tensor::{ParamStore, PoolKind, Tensor, Var};
use crate::training::{RmsProp, RmsPropConfig};

/// Parameter-name prefix of every extractor weight.
pub const EXTRACTOR_PREFIX: &str = "lr_cnn";

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorFamily {
    /// Five 4×4 convolutions, each followed by batch-norm and leaky ReLU.
    Reference5,
    CompactResidual,
    CompactInception,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    Max,
}

impl Pooling {
    pub fn kind(self) -> PoolKind {
        match self {
            Pooling::Avg => PoolKind::GlobalAvg,
            Pooling::Max => PoolKind::GlobalMax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSpec {
    pub family: ExtractorFamily,
    pub feature_depth: usize,
    pub patch_size: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_base_width() -> usize {
    4
}

fn default_in_channels() -> usize {
    1
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            family: ExtractorFamily::Reference5,
            feature_depth: 16,
            patch_size: 56,
            base_width: default_base_width(),
            in_channels: default_in_channels(),
        }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_depth == 0 || self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::Config("extractor widths must be >= 1".into()));
        }
        let min_patch = match self.family {
            ExtractorFamily::Reference5 => 16,
            ExtractorFamily::CompactResidual | ExtractorFamily::CompactInception => 4,
        };
        if self.patch_size < min_patch {
            return Err(Error::Config(format!(
                "{:?} extractor needs patches of at least {min_patch} px, got {}",
                self.family, self.patch_size
            )));
        }
        if self.family == ExtractorFamily::CompactInception && self.feature_depth < 4 {
            return Err(Error::Config("inception extractor needs feature_depth >= 4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResidualUnit {
    first: ConvUnit,
    second: ConvUnit,
}

impl ResidualUnit {
    fn new(ps: &mut ParamStore, name: &str, width: usize, seed: u64) -> Result<Self> {
        let c1 = Conv::same3(ps, &format!("{name}.conv1"), width, width, seed)?;
        let first = ConvUnit::new(c1, ps, &format!("{name}.conv1"), Activation::Relu, UnitOrder::NormThenAct, seed)?;
        let c2 = Conv::same3(ps, &format!("{name}.conv2"), width, width, seed)?;
        let second = ConvUnit::new(c2, ps, &format!("{name}.conv2"), Activation::Relu, UnitOrder::NormThenAct, seed)?;
        Ok(Self { first, second })
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        let y = self.second.forward(ctx, y)?;
        let s = ctx.graph.add(y, x)?;
        Ok(ctx.graph.relu(s))
    }

    fn units(&self) -> [&ConvUnit; 2] {
        [&self.first, &self.second]
    }

    fn units_mut(&mut self) -> [&mut ConvUnit; 2] {
        [&mut self.first, &mut self.second]
    }
}

#[derive(Clone, Debug)]
struct InceptionUnit {
    branches: Vec<Vec<ConvUnit>>,
    pool_branch: ConvUnit,
}

#[derive(Clone, Debug)]
enum Layers {
    Plain(Vec<ConvUnit>),
    Residual {
        stem: ConvUnit,
        res1: ResidualUnit,
        down: ConvUnit,
        res2: ResidualUnit,
    },
    Inception {
        stem: ConvUnit,
        down: ConvUnit,
        module: InceptionUnit,
    },
}

/// Patch feature extractor: `[P, C, p, p]` → `[P, d, h, w]`.
#[derive(Debug)]
pub struct Extractor {
    spec: ExtractorSpec,
    layers: Layers,
    patches_seen: AtomicUsize,
}

impl Clone for Extractor {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            patches_seen: AtomicUsize::new(self.forward_count()),
        }
    }
}

fn unit(
    ps: &mut ParamStore,
    name: &str,
    conv: (usize, usize, usize, usize, usize),
    act: Activation,
    seed: u64,
) -> Result<ConvUnit> {
    let (in_c, out_c, k, stride, pad) = conv;
    let c = Conv::new(ps, name, in_c, out_c, k, stride, pad, seed)?;
    ConvUnit::new(c, ps, name, act, UnitOrder::NormThenAct, seed)
}

impl Extractor {
    pub fn new(ps: &mut ParamStore, spec: &ExtractorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let p = EXTRACTOR_PREFIX;
        let (c, w, d) = (spec.in_channels, spec.base_width, spec.feature_depth);
        let layers = match spec.family {
            ExtractorFamily::Reference5 => {
                let widths = [c, w, 2 * w, 4 * w, 4 * w, d];
                let mut units = Vec::with_capacity(5);
                for i in 0..5 {
                    // stride-2 4×4 reductions, then a stride-1 4×4 mixing layer
                    let (stride, pad) = if i < 4 { (2, 1) } else { (1, 2) };
                    units.push(unit(
                        ps,
                        &format!("{p}.conv{}", i + 1),
                        (widths[i], widths[i + 1], 4, stride, pad),
                        Activation::LeakyRelu(LEAKY_SLOPE),
                        seed,
                    )?);
                }
                Layers::Plain(units)
            }
            ExtractorFamily::CompactResidual => Layers::Residual {
                stem: unit(ps, &format!("{p}.stem"), (c, w, 3, 2, 1), Activation::Relu, seed)?,
                res1: ResidualUnit::new(ps, &format!("{p}.res1"), w, seed)?,
                down: unit(ps, &format!("{p}.down"), (w, d, 3, 2, 1), Activation::Relu, seed)?,
                res2: ResidualUnit::new(ps, &format!("{p}.res2"), d, seed)?,
            },
            ExtractorFamily::CompactInception => {
                let stem = unit(ps, &format!("{p}.stem"), (c, w, 3, 2, 1), Activation::Relu, seed)?;
                let down = unit(ps, &format!("{p}.down"), (w, 2 * w, 3, 2, 1), Activation::Relu, seed)?;
                let q = d / 4;
                let last = d - 3 * q;
                let cin = 2 * w;
                let m = format!("{p}.mixed");
                let r = Activation::Relu;
                let branches = vec![
                    vec![unit(ps, &format!("{m}.b1_1x1"), (cin, q, 1, 1, 0), r, seed)?],
                    vec![
                        unit(ps, &format!("{m}.b2_1x1"), (cin, q, 1, 1, 0), r, seed)?,
                        unit(ps, &format!("{m}.b2_3x3"), (q, q, 3, 1, 1), r, seed)?,
                    ],
                    vec![
                        unit(ps, &format!("{m}.b3_1x1"), (cin, q, 1, 1, 0), r, seed)?,
                        unit(ps, &format!("{m}.b3_3x3a"), (q, q, 3, 1, 1), r, seed)?,
                        unit(ps, &format!("{m}.b3_3x3b"), (q, q, 3, 1, 1), r, seed)?,
                    ],
                ];
                let pool_branch = unit(ps, &format!("{m}.b4_pool_1x1"), (cin, last, 1, 1, 0), r, seed)?;
                Layers::Inception {
                    stem,
                    down,
                    module: InceptionUnit { branches, pool_branch },
                }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            layers,
            patches_seen: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    /// Number of patches pushed through [`Extractor::forward`] so far.
    pub fn forward_count(&self) -> usize {
        self.patches_seen.load(Ordering::Relaxed)
    }

    pub fn reset_count(&self) {
        self.patches_seen.store(0, Ordering::Relaxed);
    }

    pub fn forward(&self, ctx: &mut Ctx, patches: Var) -> Result<Var> {
        let shape = ctx.graph.shape(patches).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::dim(
                "extractor",
                format!("expected [P, {}, p, p] patches, got {shape:?}", self.spec.in_channels),
            ));
        }
        self.patches_seen.fetch_add(shape[0], Ordering::Relaxed);
        match &self.layers {
            Layers::Plain(units) => {
                let mut x = patches;
                for u in units {
                    x = u.forward(ctx, x)?;
                }
                Ok(x)
            }
            Layers::Residual { stem, res1, down, res2 } => {
                let x = stem.forward(ctx, patches)?;
                let x = res1.forward(ctx, x)?;
                let x = down.forward(ctx, x)?;
                res2.forward(ctx, x)
            }
            Layers::Inception { stem, down, module } => {
                let x = stem.forward(ctx, patches)?;
                let x = down.forward(ctx, x)?;
                let mut outs = Vec::with_capacity(4);
                for branch in &module.branches {
                    let mut y = x;
                    for u in branch {
                        y = u.forward(ctx, y)?;
                    }
                    outs.push(y);
                }
                let pooled = ctx.graph.pool(x, PoolKind::Avg3x3)?;
                outs.push(module.pool_branch.forward(ctx, pooled)?);
                ctx.graph.concat(&outs, 1)
            }
        }
    }

    fn units(&self) -> Vec<&ConvUnit> {
        match &self.layers {
            Layers::Plain(u) => u.iter().collect(),
            Layers::Residual { stem, res1, down, res2 } => {
                let mut v = vec![stem];
                v.extend(res1.units());
                v.push(down);
                v.extend(res2.units());
                v
            }
            Layers::Inception { stem, down, module } => {
                let mut v = vec![stem, down];
                v.extend(module.branches.iter().flatten());
                v.push(&module.pool_branch);
                v
            }
        }
    }

    /// Uses running statistics in every extractor batch-norm, even in training.
    pub fn set_frozen_norm(&mut self, frozen: bool) {
        match &mut self.layers {
            Layers::Plain(u) => u.iter_mut().for_each(|u| u.set_frozen_norm(frozen)),
            Layers::Residual { stem, res1, down, res2 } => {
                stem.set_frozen_norm(frozen);
                down.set_frozen_norm(frozen);
                res1.units_mut().into_iter().chain(res2.units_mut()).for_each(|u| u.set_frozen_norm(frozen));
            }
            Layers::Inception { stem, down, module } => {
                stem.set_frozen_norm(frozen);
                down.set_frozen_norm(frozen);
                module.branches.iter_mut().flatten().for_each(|u| u.set_frozen_norm(frozen));
                module.pool_branch.set_frozen_norm(frozen);
            }
        }
    }

    /// Spatial extent of the output map for one patch.
    pub fn output_size(&self) -> usize {
        let mut s = self.spec.patch_size;
        match &self.layers {
            Layers::Plain(units) => {
                for u in units {
                    s = u.conv.out_size(s);
                }
            }
            Layers::Residual { stem, down, .. } => s = down.conv.out_size(stem.conv.out_size(s)),
            Layers::Inception { stem, down, .. } => s = down.conv.out_size(stem.conv.out_size(s)),
        }
        s
    }

    /// Analytic multiply-accumulate count for one patch (convolutions only).
    pub fn macs_per_patch(&self) -> u64 {
        let p = self.spec.patch_size;
        match &self.layers {
            Layers::Plain(units) => {
                let mut s = p;
                let mut total = 0;
                for u in units {
                    total += u.conv.macs(s, s);
                    s = u.conv.out_size(s);
                }
                total
            }
            Layers::Residual { stem, res1, down, res2 } => {
                let s1 = stem.conv.out_size(p);
                let s2 = down.conv.out_size(s1);
                stem.conv.macs(p, p)
                    + res1.units().iter().map(|u| u.conv.macs(s1, s1)).sum::<u64>()
                    + down.conv.macs(s1, s1)
                    + res2.units().iter().map(|u| u.conv.macs(s2, s2)).sum::<u64>()
            }
            Layers::Inception { stem, down, module } => {
                let s1 = stem.conv.out_size(p);
                let s2 = down.conv.out_size(s1);
                stem.conv.macs(p, p)
                    + down.conv.macs(s1, s1)
                    + module.branches.iter().flatten().map(|u| u.conv.macs(s2, s2)).sum::<u64>()
                    + module.pool_branch.conv.macs(s2, s2)
            }
        }
    }

    pub fn conv_count(&self) -> usize {
        self.units().len()
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.units().iter().map(|u| u.conv.kernel).collect()
    }
}

/// Pooled patch features in the patches' spatial order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCube {
    /// `[1, d, M, N]`
    pub grid: Tensor,
    pub origin: String,
    pub pooling: Pooling,
    pub patch_size: usize,
}

impl FeatureCube {
    pub fn rows(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[3]
    }

    pub fn depth(&self) -> usize {
        self.grid.shape()[1]
    }

    /// Feature vector of cell `(i, j)`.
    pub fn column(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.depth()).map(|c| self.grid.at4(0, c, i, j)).collect()
    }
}

/// Grid extents `(M, N)` after zero-padding to whole patches.
pub fn grid_dims(height: usize, width: usize, patch_size: usize) -> (usize, usize) {
    (height.div_ceil(patch_size), width.div_ceil(patch_size))
}

fn check_image(image: &Tensor, patch_size: usize) -> Result<[usize; 3]> {
    if patch_size == 0 {
        return Err(Error::contract("patch size must be >= 1"));
    }
    match image.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(Error::contract(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

/// Splits `[C, H, W]` into non-overlapping row-major patches, zero-padding
/// the bottom and right edges up to whole patches.
pub fn tile(image: &Tensor, patch_size: usize) -> Result<Vec<(usize, usize, Tensor)>> {
    let [c, _, _] = check_image(image, patch_size)?;
    let (batch, m, n) = stack_patches(&[image], patch_size)?;
    let per = c * patch_size * patch_size;
    let data = batch.data();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let k = i * n + j;
            let t = Tensor::new(vec![c, patch_size, patch_size], data[k * per..(k + 1) * per].to_vec())?;
            out.push((i, j, t));
        }
    }
    Ok(out)
}

/// Stacks the patches of several same-sized images into `[B·M·N, C, p, p]`,
/// image-major then row-major.
pub fn stack_patches(images: &[&Tensor], patch_size: usize) -> Result<(Tensor, usize, usize)> {
    let first = images.first().ok_or_else(|| Error::contract("no images to tile"))?;
    let [c, h, w] = check_image(first, patch_size)?;
    let (m, n) = grid_dims(h, w, patch_size);
    let p = patch_size;
    let mut data = vec![0.0; images.len() * m * n * c * p * p];
    for (b, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::dim(
                "stack_patches",
                format!("image {b} has shape {:?}, expected {:?}", img.shape(), first.shape()),
            ));
        }
        let src = img.data();
        for i in 0..m {
            for j in 0..n {
                let base = ((b * m + i) * n + j) * c * p * p;
                for ch in 0..c {
                    for y in 0..p {
                        let sy = i * p + y;
                        if sy >= h {
                            break;
                        }
                        let x_end = (j * p + p).min(w);
                        let row = &src[(ch * h + sy) * w + j * p..(ch * h + sy) * w + x_end];
                        let dst = base + (ch * p + y) * p;
                        data[dst..dst + row.len()].copy_from_slice(row);
                    }
                }
            }
        }
    }
    let t = Tensor::new(vec![images.len() * m * n, c, p, p], data)?;
    Ok((t, m, n))
}

/// Reassembles a tiling (cropping the padding) into the original image.
pub fn untile(patches: &[(usize, usize, Tensor)], height: usize, width: usize) -> Result<Tensor> {
    let (_, _, first) = patches.first().ok_or_else(|| Error::contract("no patches"))?;
    let [c, p, _] = match first.shape() {
        &[c, p, q] if p == q => [c, p, q],
        s => return Err(Error::contract(format!("patches must be [C, p, p], got {s:?}"))),
    };
    let mut out = Tensor::zeros(vec![c, height, width]);
    let od = out.data_mut();
    for (i, j, t) in patches {
        for ch in 0..c {
            for y in 0..p {
                for x in 0..p {
                    let (sy, sx) = (i * p + y, j * p + x);
                    if sy < height && sx < width {
                        od[(ch * height + sy) * width + sx] = t.data()[(ch * p + y) * p + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Extractor + global pooling on stacked patches, rearranged into a
/// `[B, d, M, N]` cube.
pub fn encode_patches(
    ctx: &mut Ctx,
    extractor: &Extractor,
    pooling: Pooling,
    patches: Var,
    batch: usize,
    m: usize,
    n: usize,
) -> Result<Var> {
    let map = extractor.forward(ctx, patches)?;
    let pooled = ctx.graph.pool(map, pooling.kind())?;
    let d = ctx.graph.shape(pooled)[1];
    // pooled is [B·M·N, d, 1, 1]; cube[b, c, i, j] = pooled[(b·M·N + i·N + j)·d + c]
    let mut index = Vec::with_capacity(batch * d * m * n);
    for b in 0..batch {
        for c in 0..d {
            for i in 0..m {
                for j in 0..n {
                    index.push(((b * m + i) * n + j) * d + c);
                }
            }
        }
    }
    ctx.graph.gather(pooled, index, &[batch, d, m, n])
}

/// Encodes one image in evaluation mode.
pub fn encode(
    image: &Tensor,
    extractor: &Extractor,
    params: &ParamStore,
    pooling: Pooling,
    origin: &str,
) -> Result<FeatureCube> {
    let p = extractor.spec().patch_size;
    let (patches, m, n) = stack_patches(&[image], p)?;
    let mut ctx = Ctx::eval(params);
    let x = ctx.graph.input(patches);
    let cube = encode_patches(&mut ctx, extractor, pooling, x, 1, m, n)?;
    Ok(FeatureCube {
        grid: ctx.graph.value(cube).clone(),
        origin: origin.to_owned(),
        pooling,
        patch_size: p,
    })
}

/// Labelled patches for extractor pretraining.
#[derive(Clone, Debug, Default)]
pub struct PatchSet {
    pub patches: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn push(&mut self, patch: Tensor, label: usize) {
        self.patches.push(patch);
        self.labels.push(label);
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                h[l] += 1;
            }
        }
        h
    }
}

/// Extractor plus a throwaway dense head over pooled features.
#[derive(Clone, Debug)]
pub struct PatchClassifier {
    pub params: ParamStore,
    pub extractor: Extractor,
    pub pooling: Pooling,
    head: Dense,
    pub classes: usize,
}

impl PatchClassifier {
    pub fn new(spec: &ExtractorSpec, pooling: Pooling, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("patch classifier needs >= 1 class".into()));
        }
        let mut params = ParamStore::new();
        let extractor = Extractor::new(&mut params, spec, seed)?;
        let head = Dense::new(&mut params, "patch_head", spec.feature_depth, classes, seed)?;
        Ok(Self {
            params,
            extractor,
            pooling,
            head,
            classes,
        })
    }

    fn logits_probs(&self, ctx: &mut Ctx, patches: Var) -> Result<Var> {
        let map = self.extractor.forward(ctx, patches)?;
        let pooled = ctx.graph.pool(map, self.pooling.kind())?;
        let p = ctx.graph.shape(pooled)[0];
        let flat = ctx.graph.reshape(pooled, &[p, self.extractor.spec().feature_depth])?;
        let logits = self.head.forward(ctx, flat)?;
        ctx.graph.softmax(logits, 1)
    }

    /// Class probabilities `[P, classes]` for a stack of patches (eval mode).
    pub fn predict_proba(&self, patches: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::eval(&self.params);
        let x = ctx.graph.input(patches.clone());
        let probs = self.logits_probs(&mut ctx, x)?;
        Ok(ctx.graph.value(probs).clone())
    }

    pub fn predict(&self, patches: &Tensor) -> Result<Vec<usize>> {
        let probs = self.predict_proba(patches)?;
        Ok(probs.data().chunks_exact(self.classes).map(Tensor::argmax).collect())
    }

    pub fn accuracy(&self, set: &PatchSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::contract("accuracy of an empty patch set"));
        }
        let mut correct = 0;
        for chunk in (0..set.len()).collect::<Vec<_>>().chunks(256) {
            let batch = stack(chunk.iter().map(|&i| &set.patches[i]))?;
            let preds = self.predict(&batch)?;
            correct += chunk.iter().zip(preds).filter(|(&i, p)| set.labels[i] == *p).count();
        }
        Ok(correct as f64 / set.len() as f64)
    }
}

fn stack<'a>(patches: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut shape = None;
    let mut data = Vec::new();
    let mut count = 0;
    for p in patches {
        match &shape {
            None => shape = Some(p.shape().to_vec()),
            Some(s) if s.as_slice() != p.shape() => {
                return Err(Error::dim("stack", format!("{:?} vs {s:?}", p.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(p.data());
        count += 1;
    }
    let mut s = shape.ok_or_else(|| Error::contract("stack of zero patches"))?;
    s.insert(0, count);
    Tensor::new(s, data)
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: RmsPropConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub classifier: PatchClassifier,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains an extractor with a temporary dense head on labelled patches.
pub fn pretrain_patch_classifier(
    spec: &ExtractorSpec,
    pooling: Pooling,
    classes: usize,
    set: &PatchSet,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    if set.is_empty() {
        return Err(Error::Stratification("patch dataset is empty".into()));
    }
    let hist = set.class_histogram(classes);
    if let Some(c) = hist.iter().position(|&n| n == 0) {
        return Err(Error::Stratification(format!("class {c} has no patches")));
    }
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("patch label {bad} outside {classes} classes")));
    }
    let mut clf = PatchClassifier::new(spec, pooling, classes, opts.seed)?;
    let mut opt = RmsProp::new(opts.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..set.len()).collect();
    let bs = opts.batch_size.max(2);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            let batch = stack(chunk.iter().map(|&i| &set.patches[i]))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            clf.params.zero_grads();
            let loss_value = {
                let PatchClassifier { params, extractor, pooling, head, classes } = &mut clf;
                let mut ctx = Ctx::train(params);
                let x = ctx.graph.input(batch);
                let map = extractor.forward(&mut ctx, x)?;
                let pooled = ctx.graph.pool(map, pooling.kind())?;
                let flat = ctx.graph.reshape(pooled, &[chunk.len(), extractor.spec().feature_depth])?;
                let logits = head.forward(&mut ctx, flat)?;
                let probs = ctx.graph.softmax(logits, 1)?;
                let loss = crate::training::classification_loss(&mut ctx.graph, probs, &labels, *classes, None)?;
                ctx.backward(loss)?;
                ctx.graph.value(loss).item()
            };
            opt.step(&mut clf.params)?;
            total += loss_value;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("pretrain epoch {} loss {:.5}", epoch + 1, mean);
        epoch_losses.push(mean);
    }
    Ok(PretrainOutcome {
        classifier: clf,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic_for_whole_images() {
        let img = Tensor::zeros(vec![1, 1792, 1792]);
        assert_eq!(tile(&img, 224).unwrap().len(), 64);
        let one = Tensor::zeros(vec![1, 224, 224]);
        let t = tile(&one, 224).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].0, t[0].1), (0, 0));
    }

    #[test]
    fn ragged_image_is_zero_padded() {
        let img = Tensor::ones(vec![1, 300, 224]);
        let t = tile(&img, 224).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[1].0, t[1].1), (1, 0));
        let second = &t[1].2;
        // rows 0..76 come from the image, the remaining 148 are padding
        assert!(second.data()[..76 * 224].iter().all(|&v| v == 1.0));
        assert!(second.data()[76 * 224..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tile_rejects_bad_input() {
        assert!(tile(&Tensor::zeros(vec![4, 4]), 2).is_err());
        assert!(tile(&Tensor::zeros(vec![1, 4, 4]), 0).is_err());
    }

    #[test]
    fn reference5_structure() {
        let mut ps = ParamStore::new();
        let ex = Extractor::new(&mut ps, &ExtractorSpec::default(), 1).unwrap();
        assert_eq!(ex.conv_count(), 5);
        assert!(ex.kernel_sizes().iter().all(|&k| k == 4));
        assert_eq!(ex.output_size(), 4);
        let small = ExtractorSpec {
            patch_size: 8,
            ..ExtractorSpec::default()
        };
        assert!(Extractor::new(&mut ParamStore::new(), &small, 1).is_err());
    }

    #[test]
    fn every_family_produces_depth_d() {
        for family in [
            ExtractorFamily::Reference5,
            ExtractorFamily::CompactResidual,
            ExtractorFamily::CompactInception,
        ] {
            let spec = ExtractorSpec {
                family,
                feature_depth: 6,
                patch_size: 16,
                base_width: 2,
                in_channels: 1,
            };
            let mut ps = ParamStore::new();
            let ex = Extractor::new(&mut ps, &spec, 3).unwrap();
            let mut ctx = Ctx::eval(&ps);
            let x = ctx.graph.input(Tensor::from_fn(vec![3, 1, 16, 16], |i| (i as f64 * 0.1).sin()));
            let y = ex.forward(&mut ctx, x).unwrap();
            let s = ctx.graph.shape(y);
            assert_eq!((s[0], s[1]), (3, 6), "{family:?}");
            assert_eq!(s[2], ex.output_size());
            assert_eq!(ex.forward_count(), 3);
        }
    }
}
