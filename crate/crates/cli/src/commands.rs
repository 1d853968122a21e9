use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cact::config::RunConfig;
use cact::context_net::{arch_path, ContextModel};
use cact::data::{self, Dataset, CLASS_NAMES};
use cact::evaluation::{rank_cells, render_report};
use cact::inference::{cost_report, grade_image, write_overlay, write_windows_csv};
use cact::local_repr::{pretrain_patch_classifier, PretrainOptions};
use cact::tensor::{read_checkpoint, write_checkpoint, ParamStore};
use cact::training::{self, read_history, FoldConfig, FoldTable, HistoryRow, StrategyKind, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::failure::{Failure, EXIT_CONFIG, EXIT_ERROR};
use crate::rundir::{RunDir, CONFIG_SNAPSHOT};

type Outcome = Result<(), Failure>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::new(EXIT_ERROR, "io", format!("{}: {e}", path.display())).with("path", path.display())
}

pub fn generate(cfg: &RunConfig, run: &RunDir) -> Outcome {
    let root = &cfg.data.root;
    if root.join(data::MANIFEST).exists() {
        return Err(Failure::new(EXIT_ERROR, "exists", format!("{} already holds a dataset", root.display()))
            .with("path", root.display()));
    }
    let report = data::generate(&cfg.data.synthetic, root)?;
    let p = run.file("ambiguity.json");
    fs::write(&p, serde_json::to_string_pretty(&report).expect("plain struct")).map_err(io(&p))?;
    let n: usize = cfg.data.synthetic.per_class.iter().sum();
    println!(
        "generated {n} images in {} (mean overlap {:.3}, variance overlap {:.3})",
        root.display(),
        report.mean_overlap,
        report.variance_overlap
    );
    Ok(())
}

pub fn dataset_validate(cfg: &RunConfig, run: &RunDir) -> Outcome {
    let patch = cfg.model.extractor.patch_size;
    let issues = data::validate(&cfg.data.root, patch)?;
    let p = run.file("issues.txt");
    fs::write(&p, issues.join("\n")).map_err(io(&p))?;
    if !issues.is_empty() {
        return Err(cact::Error::Validation(issues).into());
    }
    let ds = Dataset::open(&cfg.data.root, patch)?;
    let hist = ds.class_histogram();
    println!("dataset ok: {} images, per class {hist:?}", ds.len());
    Ok(())
}

fn open_dataset(cfg: &RunConfig, patch: usize) -> Result<Dataset, Failure> {
    Ok(Dataset::open(&cfg.data.root, patch)?)
}

pub fn pretrain(cfg: &RunConfig, run: &RunDir) -> Outcome {
    let spec = &cfg.model.extractor;
    let ds = open_dataset(cfg, spec.patch_size)?;
    let train_images = ds.load_fold("train")?;
    let set = data::derive_patch_dataset(&train_images, spec.patch_size, cfg.pretrain.per_class_cap, cfg.seed)?;
    log::info!("{} training patches, per class {:?}", set.len(), set.class_histogram(CLASS_NAMES.len()));
    let opts = PretrainOptions {
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        optimizer: cfg.pretrain.optimizer,
        seed: cfg.seed,
    };
    let out = pretrain_patch_classifier(spec, cfg.model.pooling, CLASS_NAMES.len(), &set, &opts)?;
    let ckpt = run.file("extractor.ckpt");
    let f = run.create_file("extractor.ckpt")?;
    write_checkpoint(BufWriter::new(f), &out.classifier.params.named_tensors()).map_err(io(&ckpt))?;
    let mut w = csv::Writer::from_writer(run.create_file("pretrain_losses.csv")?);
    let csv_err = |e: csv::Error| Failure::from(cact::Error::from(e));
    w.write_record(["epoch", "loss"]).map_err(csv_err)?;
    for (i, l) in out.epoch_losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(io(&ckpt))?;
    let val = ds.load_fold("val")?;
    if !val.is_empty() {
        let val_set = data::derive_patch_dataset(&val, spec.patch_size, None, cfg.seed)?;
        println!("val patch accuracy {:.4}", out.classifier.accuracy(&val_set)?);
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn load_pretrained(path: &Path) -> Result<ParamStore, Failure> {
    if !path.exists() {
        return Err(Failure::missing_checkpoint(path));
    }
    let f = fs::File::open(path).map_err(io(path))?;
    let mut ps = ParamStore::new();
    for (name, t) in read_checkpoint(std::io::BufReader::new(f))? {
        ps.add_tensor(&name, t)?;
    }
    Ok(ps)
}

fn write_history_file(run: &RunDir, rows: &[HistoryRow]) -> Outcome {
    training::write_history(run.create_file("history.csv")?, rows)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, run: &RunDir) -> Outcome {
    let ds = open_dataset(cfg, cfg.model.extractor.patch_size)?;
    let pretrained = cfg.train.pretrained.as_deref().map(load_pretrained).transpose()?;
    let opts = TrainOptions {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        optimizer: cfg.train.optimizer,
        seed: cfg.seed,
        fold: 0,
        finetune_extractor: cfg.train.finetune_extractor,
        pretrained,
    };
    match cfg.train.folds {
        0 => {
            let (tr, va) = (ds.load_fold("train")?, ds.load_fold("val")?);
            let out = training::train(&cfg.model, &tr, &va, &cfg.strategy, &opts)?;
            write_history_file(run, &out.history)?;
            let ckpt = run.file("model.ckpt");
            out.model.save(&ckpt)?;
            let best = &out.history[out.best_epoch.max(1) - 1];
            println!("best epoch {} val accuracy {:.4}", out.best_epoch, best.val_accuracy);
            println!("checkpoint {}", ckpt.display());
        }
        1 => {
            return Err(Failure::new(EXIT_CONFIG, "config", "train.folds must be 0 (single run) or >= 2").with("key", "folds"));
        }
        k => {
            let mut images = ds.load_fold("train")?;
            images.extend(ds.load_fold("val")?);
            let configs = [FoldConfig {
                label: cfg.strategy.kind.name().to_owned(),
                arch: cfg.model.clone(),
                strategy: cfg.strategy,
            }];
            let (table, history) = training::run_folds(&images, k, &configs, &opts, cfg.workers)?;
            write_history_file(run, &history)?;
            table.write_csv(run.create_file("fold_table.csv")?)?;
            println!(
                "{}: mean {:.2}% std {:.2} over {k} folds",
                table.configs[0],
                table.mean(0),
                table.std(0)
            );
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    id: String,
    label: String,
    predicted: String,
    outcome: String,
    tie: bool,
    windows: usize,
    strategy: String,
}

/// Strategy recorded next to the checkpoint by the training run, else the
/// current configuration's.
fn checkpoint_strategy(cfg: &RunConfig, checkpoint: &Path) -> String {
    let snap = checkpoint.parent().map(|d| d.join(CONFIG_SNAPSHOT));
    match snap.filter(|p| p.exists()).map(|p| RunConfig::load(&p)) {
        Some(Ok(c)) => c.strategy.kind.name().to_owned(),
        _ => cfg.strategy.kind.name().to_owned(),
    }
}

pub fn infer(cfg: &RunConfig, run: &RunDir, checkpoint: &Path) -> Outcome {
    for p in [checkpoint.to_path_buf(), arch_path(checkpoint)] {
        if !p.exists() {
            return Err(Failure::missing_checkpoint(&p));
        }
    }
    let model = ContextModel::load(checkpoint)?;
    let patch = model.arch.extractor.patch_size;
    let ds = open_dataset(cfg, patch)?;
    let images = ds.load_fold(&cfg.infer.split)?;
    if images.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "config", format!("split `{}` has no images", cfg.infer.split))
            .with("key", "split"));
    }
    let strategy = checkpoint_strategy(cfg, checkpoint);
    let maps = run.file("windows");
    fs::create_dir_all(&maps).map_err(io(&maps))?;
    let (window, stride) = (cfg.infer.window_cells, cfg.infer.stride_cells);
    let mut rows = Vec::with_capacity(images.len());
    let mut correct = 0;
    for img in &images {
        let g = grade_image(&model, &img.pixels, window, stride)?;
        let predicted = g.vote.outcome.as_class();
        correct += usize::from(predicted == img.label);
        let wp = maps.join(format!("{}.csv", img.id));
        write_windows_csv(fs::File::create(&wp).map_err(io(&wp))?, &g.windows)?;
        let op = maps.join(format!("{}_overlay.csv", img.id));
        write_overlay(fs::File::create(&op).map_err(io(&op))?, &g.windows, patch, window)?;
        rows.push(PredictionRow {
            id: img.id.clone(),
            label: CLASS_NAMES[img.label].to_owned(),
            predicted: CLASS_NAMES[predicted].to_owned(),
            outcome: g.vote.outcome.name().to_owned(),
            tie: g.vote.tie,
            windows: g.windows.len(),
            strategy: strategy.clone(),
        });
    }
    let mut w = csv::Writer::from_writer(run.create_file("predictions.csv")?);
    for r in &rows {
        w.serialize(r).map_err(|e| Failure::from(cact::Error::from(e)))?;
    }
    w.flush().map_err(io(&run.file("predictions.csv")))?;
    let shape = images[0].pixels.shape();
    let cost = cost_report(shape[1], shape[2], patch, window, stride, &model)?;
    let cp = run.file("cost.txt");
    fs::write(&cp, format!("{cost}\n")).map_err(io(&cp))?;
    println!("{cost}");
    println!(
        "{} accuracy {:.4} over {} images",
        cfg.infer.split,
        correct as f64 / images.len() as f64,
        images.len()
    );
    Ok(())
}

/// Cells `(row, column) -> percent` gathered from report inputs.
#[derive(Default)]
struct Cells {
    rows: Vec<String>,
    cols: Vec<String>,
    values: BTreeMap<(String, String), f64>,
}

impl Cells {
    fn put(&mut self, row: String, col: String, v: f64, source: &Path) -> Outcome {
        if !self.rows.contains(&row) {
            self.rows.push(row.clone());
        }
        if !self.cols.contains(&col) {
            self.cols.push(col.clone());
        }
        if self.values.insert((row.clone(), col.clone()), v).is_some() {
            return Err(Failure::new(
                EXIT_ERROR,
                "contract",
                format!("{}: a second value for {row} / {col}", source.display()),
            ));
        }
        Ok(())
    }

    /// Strategy columns come first in their canonical order.
    fn matrix(mut self) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>), Failure> {
        let canonical: Vec<String> = StrategyKind::ALL.iter().map(|k| k.name().to_owned()).collect();
        self.cols.sort_by_key(|c| canonical.iter().position(|k| k == c).unwrap_or(canonical.len()));
        let mut values = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            let mut row = Vec::with_capacity(self.cols.len());
            for c in &self.cols {
                let v = self.values.get(&(r.clone(), c.clone())).ok_or_else(|| {
                    Failure::new(EXIT_ERROR, "contract", format!("no value for {r} / {c}; inputs must cover every cell"))
                })?;
                row.push(*v);
            }
            values.push(row);
        }
        Ok((self.rows, self.cols, values))
    }
}

fn first_header(path: &Path) -> Result<String, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::from(cact::Error::from(e)))?;
    let h = r.headers().map_err(|e| Failure::from(cact::Error::from(e)))?;
    Ok(h.get(0).unwrap_or_default().to_owned())
}

pub fn report(cfg: &RunConfig, run: &RunDir, inputs: &[PathBuf]) -> Outcome {
    let inputs = if inputs.is_empty() { &cfg.report.inputs[..] } else { inputs };
    if inputs.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "config", "report needs at least one input CSV").with("key", "inputs"));
    }
    let mut cells = Cells::default();
    let mut histories = Vec::new();
    for p in inputs {
        if !p.exists() {
            return Err(cact::Error::MissingFile(p.clone()).into());
        }
        let open = || fs::File::open(p).map_err(io(p));
        match first_header(p)?.as_str() {
            "epoch" => {
                let rows = read_history(open()?)?;
                let mut best: BTreeMap<(usize, String), f64> = BTreeMap::new();
                for r in &rows {
                    let e = best.entry((r.fold, r.strategy.clone())).or_insert(f64::NEG_INFINITY);
                    *e = e.max(100.0 * r.val_accuracy);
                }
                for ((fold, strategy), v) in best {
                    let row = if fold == 0 { "val".to_owned() } else { format!("Fold-{fold}") };
                    cells.put(row, strategy, v, p)?;
                }
                histories.extend(rows);
            }
            "id" => {
                let mut r = csv::Reader::from_reader(open()?);
                let rows: Vec<PredictionRow> = r
                    .deserialize()
                    .collect::<Result<_, _>>()
                    .map_err(|e| Failure::from(cact::Error::from(e)))?;
                let Some(first) = rows.first() else {
                    return Err(Failure::new(EXIT_ERROR, "format", format!("{} has no predictions", p.display())));
                };
                let acc = rows.iter().filter(|r| r.predicted == r.label).count() as f64 / rows.len() as f64;
                cells.put("test".into(), first.strategy.clone(), 100.0 * acc, p)?;
            }
            "config" => {
                let t = FoldTable::read_csv(open()?)?;
                for (c, accs) in t.configs.iter().zip(&t.accuracy) {
                    for (f, a) in accs.iter().enumerate() {
                        cells.put(format!("Fold-{}", f + 1), c.clone(), *a, p)?;
                    }
                }
            }
            other => {
                return Err(Failure::new(
                    EXIT_ERROR,
                    "format",
                    format!("{}: unrecognised CSV (first column `{other}`)", p.display()),
                ));
            }
        }
    }
    let (rows, cols, values) = cells.matrix()?;
    let table = rank_cells(&rows, &cols, &values)?;
    let bundle = render_report(&table, &histories, &[], &run.path)?;
    print!("{}", fs::read_to_string(&bundle.text).map_err(io(&bundle.text))?);
    Ok(())
}
