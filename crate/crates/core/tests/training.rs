mod common;

use cact::context_net::ContextModel;
use cact::data::{LabeledImage, Mask};
use cact::layers::Ctx;
use cact::local_repr::EXTRACTOR_PREFIX;
use cact::tensor::{ParamStore, Tensor};
use cact::training::*;
use common::*;

fn splits(dir: &std::path::Path) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let ds = small_dataset(dir, 5, 3);
    (ds.load_fold("train").unwrap(), ds.load_fold("val").unwrap())
}

fn opts(epochs: usize, lr: f64) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: 4,
        optimizer: RmsPropConfig { lr, ..RmsPropConfig::default() },
        seed: 21,
        ..TrainOptions::default()
    }
}

fn bits(h: &[HistoryRow]) -> Vec<(u64, u64)> {
    h.iter().map(|r| (r.train_loss.to_bits(), r.val_accuracy.to_bits())).collect()
}

#[test]
fn rmsprop_descends_a_quadratic_bowl() {
    let mut ps = ParamStore::new();
    ps.add_tensor("p", Tensor::scalar(5.0)).unwrap();
    let mut opt = RmsProp::new(RmsPropConfig { lr: 0.1, ..RmsPropConfig::default() });
    for _ in 0..100 {
        ps.zero_grads();
        let mut ctx = Ctx::train(&mut ps);
        let id = ctx.store().find("p").unwrap();
        let p = ctx.param(id);
        let sq = ctx.graph.hadamard(p, p).unwrap();
        let l = ctx.graph.sum(sq);
        ctx.backward(l).unwrap();
        drop(ctx);
        opt.step(&mut ps).unwrap();
    }
    let p = ps.params()[0].tensor.item();
    assert!(p.abs() < 0.1, "ended at {p}");
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, val) = splits(dir.path());
    let out = train(&small_arch(), &train_set, &val, &Strategy::default(), &opts(2, 0.0)).unwrap();
    let fresh = ContextModel::new(&small_arch(), 21).unwrap();
    for (a, b) in out.model.params.params().iter().zip(fresh.params.params()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
    assert_eq!(out.history.len(), 2);
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, val) = splits(dir.path());
    let run = || train(&small_arch(), &train_set, &val, &Strategy::default(), &opts(3, 1e-3)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(bits(&a.history), bits(&b.history));
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(a.model.params.named_tensors(), b.model.params.named_tensors());
}

#[test]
fn auxiliary_with_full_classification_weight_traces_standard() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, val) = splits(dir.path());
    let o = opts(3, 1e-3);
    let standard = train(&small_arch(), &train_set, &val, &Strategy::default(), &o).unwrap();
    let aux = Strategy {
        alpha_joint: 1.0,
        ..Strategy::new(StrategyKind::Auxiliary)
    };
    let joint = train(&small_arch(), &train_set, &val, &aux, &o).unwrap();
    assert_eq!(bits(&joint.history), bits(&standard.history));
}

#[test]
fn unit_weights_trace_standard() {
    let dir = tempfile::tempdir().unwrap();
    let (mut train_set, val) = splits(dir.path());
    // every cell tissue: R_roi = 1 so every sample weight is 1
    for img in &mut train_set {
        let (r, c) = (img.mask.rows, img.mask.cols);
        img.mask = Mask::new(r, c, vec![1; r * c]).unwrap();
    }
    let o = opts(3, 1e-3);
    let standard = train(&small_arch(), &train_set, &val, &Strategy::default(), &o).unwrap();
    let weighted = train(&small_arch(), &train_set, &val, &Strategy::new(StrategyKind::Weighted), &o).unwrap();
    assert_eq!(bits(&weighted.history), bits(&standard.history));
}

#[test]
fn a_fixed_extractor_is_never_updated() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, val) = splits(dir.path());
    let o = TrainOptions { finetune_extractor: false, ..opts(2, 1e-2) };
    let out = train(&small_arch(), &train_set, &val, &Strategy::default(), &o).unwrap();
    let fresh = ContextModel::new(&small_arch(), 21).unwrap();
    let mut moved = false;
    for (a, b) in out.model.params.params().iter().zip(fresh.params.params()) {
        if a.name.starts_with(EXTRACTOR_PREFIX) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        } else {
            moved |= a.tensor.data() != b.tensor.data();
        }
    }
    assert!(moved, "context parameters should train");
}

#[test]
fn pretrained_extractor_weights_are_copied_in() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, val) = splits(dir.path());
    let donor = ContextModel::new(&small_arch(), 99).unwrap();
    let o = TrainOptions {
        pretrained: Some(donor.params.clone()),
        finetune_extractor: false,
        ..opts(1, 0.0)
    };
    let out = train(&small_arch(), &train_set, &val, &Strategy::default(), &o).unwrap();
    let fresh = ContextModel::new(&small_arch(), 21).unwrap();
    for ((a, d), f) in out.model.params.params().iter().zip(donor.params.params()).zip(fresh.params.params()) {
        let source = if a.name.starts_with(EXTRACTOR_PREFIX) { d } else { f };
        assert_eq!(a.tensor.data(), source.tensor.data(), "{}", a.name);
    }
}

#[test]
fn overlapping_splits_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, _) = splits(dir.path());
    let err = train(&small_arch(), &train_set, &train_set[..1], &Strategy::default(), &opts(1, 0.0)).unwrap_err();
    assert!(err.to_string().contains(&train_set[0].id));
}

#[test]
fn folds_cover_every_image_once() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 5, 4);
    let images = ds.load_all().unwrap();
    let configs = vec![
        FoldConfig { label: "b1".into(), arch: small_arch(), strategy: Strategy::default() },
        FoldConfig { label: "weighted".into(), arch: small_arch(), strategy: Strategy::new(StrategyKind::Weighted) },
    ];
    let (table, history) = run_folds(&images, 3, &configs, &opts(1, 1e-3), 2).unwrap();
    assert_eq!(table.accuracy.len(), 2);
    assert!(table.accuracy.iter().all(|r| r.len() == 3 && r.iter().all(|a| (0.0..=100.0).contains(a))));
    assert_eq!(history.len(), 6);
    let labels: Vec<usize> = images.iter().map(|i| i.label).collect();
    let folds = cact::data::stratified_folds(&labels, 3).unwrap();
    let mut sizes = [0; 3];
    folds.iter().for_each(|&f| sizes[f] += 1);
    assert_eq!(sizes, [7, 7, 6]);
    let m = table.mean(0);
    assert!((m - table.accuracy[0].iter().sum::<f64>() / 3.0).abs() < 1e-12);
}
