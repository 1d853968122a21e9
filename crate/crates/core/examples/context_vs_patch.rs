//! Trains the context model and the patch-vote baseline on a freshly
//! generated synthetic dataset and prints both test accuracies.
//!
//! cargo run --release -p cact-core --example context_vs_patch -- [seed] [epochs] [lr]

use std::time::Instant;

use cact::context_net::ModelArch;
use cact::data::{derive_patch_dataset, generate, Dataset, SyntheticSpec};
use cact::inference::patch_vote;
use cact::local_repr::{pretrain_patch_classifier, PretrainOptions};
use cact::training::{image_accuracy, train, RmsPropConfig, Strategy, TrainOptions};

fn main() -> cact::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let dir = std::env::temp_dir().join(format!("cact_demo_{seed}"));
    let _ = std::fs::remove_dir_all(&dir);
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let t = Instant::now();
    let report = generate(&spec, &dir)?;
    println!("generated in {:.1}s, overlap {report:?}", t.elapsed().as_secs_f64());
    let ds = Dataset::open(&dir, spec.patch_size)?;
    let (tr, va, te) = (ds.load_fold("train")?, ds.load_fold("val")?, ds.load_fold("test")?);

    let arch = ModelArch::default();
    let opts = TrainOptions {
        epochs,
        seed,
        optimizer: RmsPropConfig { lr, ..Default::default() },
        ..Default::default()
    };
    let t = Instant::now();
    let out = train(&arch, &tr, &va, &Strategy::default(), &opts)?;
    for h in &out.history {
        println!("epoch {} loss {:.4} val {:.3}", h.epoch, h.train_loss, h.val_accuracy);
    }
    let ctx_acc = image_accuracy(&out.model, &te)?;
    println!("context model: test acc {ctx_acc:.3} (best epoch {}) in {:.1}s", out.best_epoch, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let patches = derive_patch_dataset(&tr, spec.patch_size, Some(400), seed)?;
    let pre = pretrain_patch_classifier(
        &arch.extractor,
        arch.pooling,
        4,
        &patches,
        &PretrainOptions {
            epochs: 10,
            batch_size: 32,
            optimizer: RmsPropConfig { lr: 1e-3, ..Default::default() },
            seed,
        },
    )?;
    let mut correct = 0;
    for img in &te {
        if patch_vote(&pre.classifier, &img.pixels)?.outcome.as_class() == img.label {
            correct += 1;
        }
    }
    println!(
        "patch baseline: test acc {:.3} in {:.1}s (losses {:?})",
        correct as f64 / te.len() as f64,
        t.elapsed().as_secs_f64(),
        pre.epoch_losses
    );
    Ok(())
}
