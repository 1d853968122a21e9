use std::io::{Read, Write};

use rayon::prelude::*;

use super::{image_accuracy, train, HistoryRow, Strategy, TrainOptions};
use crate::context_net::ModelArch;
use crate::data::{stratified_folds, LabeledImage};
use crate::error::{Error, Result};

/// One row of a fold table: an architecture trained with a strategy.
#[derive(Clone, Debug)]
pub struct FoldConfig {
    pub label: String,
    pub arch: ModelArch,
    pub strategy: Strategy,
}

/// Per-fold test accuracies (percent) for each configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldTable {
    pub configs: Vec<String>,
    pub accuracy: Vec<Vec<f64>>,
}

impl FoldTable {
    pub fn folds(&self) -> usize {
        self.accuracy.first().map_or(0, Vec::len)
    }

    pub fn mean(&self, row: usize) -> f64 {
        let r = &self.accuracy[row];
        r.iter().sum::<f64>() / r.len() as f64
    }

    /// Population standard deviation across folds.
    pub fn std(&self, row: usize) -> f64 {
        let m = self.mean(row);
        let r = &self.accuracy[row];
        (r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / r.len() as f64).sqrt()
    }

    pub fn headers(&self) -> Vec<String> {
        let mut h: Vec<String> = (1..=self.folds()).map(|f| format!("Fold-{f}")).collect();
        h.push("Mean".into());
        h.push("Std".into());
        h
    }

    /// Rows of `[fold accuracies.., mean, std]`.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        (0..self.configs.len())
            .map(|r| {
                let mut row = self.accuracy[r].clone();
                row.push(self.mean(r));
                row.push(self.std(r));
                row
            })
            .collect()
    }

    /// CSV with a `config` column followed by [`FoldTable::headers`].
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["config".to_owned()];
        header.extend(self.headers());
        w.write_record(&header)?;
        for (label, row) in self.configs.iter().zip(self.matrix()) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<fold table>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (configs, _, matrix) = crate::evaluation::read_matrix_csv(r)?;
        let accuracy = matrix
            .into_iter()
            .map(|mut row| {
                if row.len() < 3 {
                    return Err(Error::Format("fold table rows need folds, mean and std".into()));
                }
                row.truncate(row.len() - 2);
                Ok(row)
            })
            .collect::<Result<_>>()?;
        Ok(Self { configs, accuracy })
    }
}

/// Every fifth item of the stratified order is held out for validation.
fn split_validation(pool: &[usize], images: &[LabeledImage]) -> (Vec<usize>, Vec<usize>) {
    let mut order = pool.to_vec();
    order.sort_by_key(|&i| (images[i].label, i));
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (n, i) in order.into_iter().enumerate() {
        if n % 5 == 4 {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    tr.sort_unstable();
    va.sort_unstable();
    (tr, va)
}

/// k-fold cross-validation of every configuration; folds run on up to
/// `workers` threads, each fold training single-threaded.
pub fn run_folds(
    images: &[LabeledImage],
    k: usize,
    configs: &[FoldConfig],
    opts: &TrainOptions,
    workers: usize,
) -> Result<(FoldTable, Vec<HistoryRow>)> {
    let labels: Vec<usize> = images.iter().map(|i| i.label).collect();
    let folds = stratified_folds(&labels, k)?;
    let jobs: Vec<(usize, usize)> = (0..configs.len()).flat_map(|c| (0..k).map(move |f| (c, f))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<(f64, Vec<HistoryRow>)>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, f)| {
                let test: Vec<LabeledImage> = (0..images.len()).filter(|&i| folds[i] == f).map(|i| images[i].clone()).collect();
                let rest: Vec<usize> = (0..images.len()).filter(|&i| folds[i] != f).collect();
                let (tr, va) = split_validation(&rest, images);
                let pick = |ix: &[usize]| ix.iter().map(|&i| images[i].clone()).collect::<Vec<_>>();
                let o = TrainOptions {
                    fold: f + 1,
                    ..opts.clone()
                };
                let out = train(&configs[c].arch, &pick(&tr), &pick(&va), &configs[c].strategy, &o)?;
                Ok((100.0 * image_accuracy(&out.model, &test)?, out.history))
            })
            .collect()
    });
    let mut accuracy = vec![vec![0.0; k]; configs.len()];
    let mut history = Vec::new();
    for (&(c, f), r) in jobs.iter().zip(results) {
        let (acc, h) = r?;
        accuracy[c][f] = acc;
        history.extend(h);
    }
    Ok((
        FoldTable {
            configs: configs.iter().map(|c| c.label.clone()).collect(),
            accuracy,
        },
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rows_have_zero_spread() {
        let t = FoldTable {
            configs: vec!["a".into()],
            accuracy: vec![vec![91.5; 3]],
        };
        assert_eq!(t.std(0), 0.0);
        assert_eq!(t.mean(0), 91.5);
    }

    #[test]
    fn csv_round_trips() {
        let t = FoldTable {
            configs: vec!["ResNet50".into(), "MobileNet".into()],
            accuracy: vec![vec![95.74, 89.36, 90.00], vec![95.74, 87.23, 91.11]],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(FoldTable::read_csv(buf.as_slice()).unwrap(), t);
    }
}
