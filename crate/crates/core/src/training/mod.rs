//! Losses, RMSprop, the four training strategies, and the k-fold driver.

mod folds;
mod loss;
mod optim;

pub use folds::{run_folds, FoldConfig, FoldTable};
pub use loss::{
    classification_loss, joint_loss, loss_cls, loss_joint, loss_seg, loss_weighted, sample_weight,
    segmentation_loss, PROB_FLOOR,
};
pub use optim::{RmsProp, RmsPropConfig};

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context_net::{ContextModel, ModelArch, Outputs};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::local_repr::EXTRACTOR_PREFIX;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Standard,
    Weighted,
    Auxiliary,
    Attention,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Standard,
        StrategyKind::Weighted,
        StrategyKind::Auxiliary,
        StrategyKind::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Standard => "standard",
            StrategyKind::Weighted => "weighted",
            StrategyKind::Auxiliary => "auxiliary",
            StrategyKind::Attention => "attention",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub alpha_joint: f64,
    pub alpha_roi: f64,
}

impl Default for Strategy {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Standard,
            alpha_joint: 0.5,
            alpha_roi: 0.10,
        }
    }
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// The architecture this strategy trains: the gate and auxiliary head are
    /// switched on or off to match.
    pub fn apply(&self, arch: &ModelArch) -> ModelArch {
        let mut a = arch.clone();
        a.attention = self.kind == StrategyKind::Attention;
        a.aux_head = matches!(self.kind, StrategyKind::Auxiliary | StrategyKind::Attention);
        a
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    pub seed: u64,
    /// Recorded in the history; no effect on training.
    pub fold: usize,
    /// When false the extractor is held fixed and cubes are computed once.
    pub finetune_extractor: bool,
    /// Extractor weights copied in before training.
    pub pretrained: Option<ParamStore>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            optimizer: RmsPropConfig::default(),
            seed: 0,
            fold: 0,
            finetune_extractor: true,
            pretrained: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub strategy: String,
    pub fold: usize,
    pub seed: u64,
}

pub fn write_history<W: Write>(w: W, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<history>", e))?;
    Ok(())
}

pub fn read_history<R: std::io::Read>(r: R) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_reader(r);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: ContextModel,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
}

/// Image-level accuracy of argmax predictions.
pub fn image_accuracy(model: &ContextModel, images: &[LabeledImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::contract("accuracy of an empty image list"));
    }
    let mut correct = 0;
    for img in images {
        if model.predict_image(&img.pixels)?.class == img.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

fn check_split(train: &[LabeledImage], val: &[LabeledImage]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract(format!(
            "training needs non-empty splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let ids: HashSet<&str> = train.iter().map(|i| i.id.as_str()).collect();
    if let Some(dup) = val.iter().find(|v| ids.contains(v.id.as_str())) {
        return Err(Error::contract(format!("image `{}` is in both train and val", dup.id)));
    }
    Ok(())
}

/// One optimisation step's loss on a batch, recorded into `ctx`.
fn batch_loss(
    model: &ContextModel,
    ctx: &mut Ctx,
    batch: &[&LabeledImage],
    cubes: Option<&[Tensor]>,
    strategy: &Strategy,
) -> Result<Var> {
    let classes = model.classes();
    let outputs = match cubes {
        Some(c) => {
            let d = c[0].shape()[1..].to_vec();
            let mut data = Vec::with_capacity(c.len() * c[0].len());
            for t in c {
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![c.len()];
            shape.extend(d);
            let x = ctx.graph.input(Tensor::new(shape, data)?);
            model.forward_cube(ctx, x)?
        }
        None => {
            let imgs: Vec<&Tensor> = batch.iter().map(|i| &i.pixels).collect();
            model.forward_images(ctx, &imgs)?
        }
    };
    let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
    let masks: Vec<&[usize]> = batch.iter().map(|i| i.mask.cells.as_slice()).collect();
    let roi: Vec<f64> = batch.iter().map(|i| i.mask.roi_ratio()).collect();
    strategy_loss(&mut ctx.graph, &outputs, &labels, &masks, &roi, classes, strategy)
}

/// The loss a strategy optimises: plain or ROI-weighted classification
/// loss, or the joint classification + segmentation loss.
pub fn strategy_loss(
    g: &mut Graph,
    outputs: &Outputs,
    labels: &[usize],
    masks: &[&[usize]],
    roi: &[f64],
    classes: usize,
    strategy: &Strategy,
) -> Result<Var> {
    match strategy.kind {
        StrategyKind::Standard => classification_loss(g, outputs.probs, labels, classes, None),
        StrategyKind::Weighted => {
            let w = roi
                .iter()
                .map(|&r| sample_weight(r, strategy.alpha_roi))
                .collect::<Result<Vec<_>>>()?;
            classification_loss(g, outputs.probs, labels, classes, Some(&w))
        }
        StrategyKind::Auxiliary | StrategyKind::Attention => {
            let seg = outputs
                .seg
                .ok_or_else(|| Error::contract("joint loss needs the auxiliary head"))?;
            let cls = classification_loss(g, outputs.probs, labels, classes, None)?;
            let s = segmentation_loss(g, seg, masks, classes)?;
            joint_loss(g, cls, s, strategy.alpha_joint)
        }
    }
}

/// Trains a fresh model. Deterministic in `opts.seed`: initialisation and
/// the per-epoch shuffle both derive from it.
pub fn train(
    arch: &ModelArch,
    train: &[LabeledImage],
    val: &[LabeledImage],
    strategy: &Strategy,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    check_split(train, val)?;
    let arch = strategy.apply(arch);
    let mut model = ContextModel::new(&arch, opts.seed)?;
    if let Some(pre) = &opts.pretrained {
        let n = model.params.copy_matching_from(pre, EXTRACTOR_PREFIX);
        log::info!("loaded {n} pretrained extractor tensors");
    }
    let cubes = if opts.finetune_extractor {
        None
    } else {
        model.params.set_trainable(EXTRACTOR_PREFIX, false);
        Some(
            train
                .iter()
                .map(|i| Ok(model.encode(&i.pixels, &i.id)?.grid))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let mut opt = RmsProp::new(opts.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = opts.batch_size.max(1);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(bs) {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &train[i]).collect();
            let batch_cubes: Option<Vec<Tensor>> = cubes.as_ref().map(|c| chunk.iter().map(|&i| c[i].clone()).collect());
            model.params.zero_grads();
            let value = {
                let mut store = std::mem::take(&mut model.params);
                let r = (|| {
                    let mut ctx = Ctx::train(&mut store);
                    let loss = batch_loss(&model, &mut ctx, &batch, batch_cubes.as_deref(), strategy)?;
                    ctx.backward(loss)?;
                    Ok::<_, Error>(ctx.graph.value(loss).item())
                })();
                model.params = store;
                r?
            };
            opt.step(&mut model.params)?;
            total += value;
            steps += 1;
        }
        let val_accuracy = image_accuracy(&model, val)?;
        let train_loss = total / steps as f64;
        log::info!(
            "{} fold {} epoch {epoch}: loss {train_loss:.5} val acc {val_accuracy:.3}",
            strategy.kind.name(),
            opts.fold
        );
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_accuracy,
            strategy: strategy.kind.name().to_owned(),
            fold: opts.fold,
            seed: opts.seed,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_accuracy > *b) {
            best = Some((val_accuracy, epoch, model.params.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            model.params = params;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}
