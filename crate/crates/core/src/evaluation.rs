//! Accuracy, per-class F1, and rank-sum comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{write_overlay, write_windows_csv, WindowPrediction};
use crate::training::HistoryRow;

pub fn accuracy(preds: &[usize], truths: &[usize]) -> Result<f64> {
    check_aligned(preds, truths)?;
    Ok(preds.iter().zip(truths).filter(|(p, t)| p == t).count() as f64 / preds.len() as f64)
}

fn check_aligned(preds: &[usize], truths: &[usize]) -> Result<()> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::contract(format!(
            "need non-empty aligned lists, got {} predictions and {} truths",
            preds.len(),
            truths.len()
        )));
    }
    Ok(())
}

/// `2PR/(P+R)` for one class; 0 when `P + R = 0`.
pub fn f1_per_class(preds: &[usize], truths: &[usize], class: usize) -> Result<f64> {
    check_aligned(preds, truths)?;
    let tp = preds.iter().zip(truths).filter(|&(&p, &t)| p == class && t == class).count() as f64;
    let predicted = preds.iter().filter(|&&p| p == class).count() as f64;
    let actual = truths.iter().filter(|&&t| t == class).count() as f64;
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Orange,
    Green,
    Blue,
    Yellow,
    Red,
    None,
}

impl Color {
    pub fn rank(self) -> u32 {
        match self {
            Color::Orange => 1,
            Color::Green => 2,
            Color::Blue => 3,
            Color::Yellow => 4,
            Color::Red => 5,
            Color::None => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Orange => "orange",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Red => "red",
            Color::None => "none",
        }
    }

    /// Band of `value / row_max`; bands are inclusive at their lower edge.
    pub fn from_ratio(ratio: f64) -> Self {
        if ratio >= 1.0 {
            Color::Orange
        } else if ratio >= 0.975 {
            Color::Green
        } else if ratio >= 0.95 {
            Color::Blue
        } else if ratio >= 0.90 {
            Color::Yellow
        } else if ratio >= 0.85 {
            Color::Red
        } else {
            Color::None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub colors: Vec<Vec<Color>>,
    pub rank_sums: Vec<u32>,
}

impl RankTable {
    pub fn ranks(&self) -> Vec<Vec<u32>> {
        self.colors.iter().map(|r| r.iter().map(|c| c.rank()).collect()).collect()
    }
}

/// Colours each row relative to its maximum and sums ranks per column. All
/// cells equal to the row maximum are orange.
pub fn rank_cells(rows: &[String], cols: &[String], values: &[Vec<f64>]) -> Result<RankTable> {
    if values.len() != rows.len() {
        return Err(Error::contract(format!("{} row labels for {} rows", rows.len(), values.len())));
    }
    let mut colors = Vec::with_capacity(values.len());
    for (r, row) in values.iter().enumerate() {
        if row.len() != cols.len() {
            return Err(Error::contract(format!(
                "row `{}` has {} values for {} columns",
                rows[r],
                row.len(),
                cols.len()
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::contract(format!("row `{}` has no finite maximum", rows[r])));
        }
        colors.push(
            row.iter()
                .map(|&v| if v == max { Color::Orange } else { Color::from_ratio(v / max) })
                .collect::<Vec<_>>(),
        );
    }
    let rank_sums = (0..cols.len()).map(|c| colors.iter().map(|r: &Vec<Color>| r[c].rank()).sum()).collect();
    Ok(RankTable {
        rows: rows.to_vec(),
        cols: cols.to_vec(),
        values: values.to_vec(),
        colors,
        rank_sums,
    })
}

/// Plain-text table with colour names and a closing rank-sum line.
pub fn render_text(t: &RankTable) -> String {
    let label_w = t.rows.iter().map(String::len).chain(["Rank-sum".len()]).max().unwrap_or(8);
    let cells: Vec<Vec<String>> = t
        .values
        .iter()
        .zip(&t.colors)
        .map(|(vr, cr)| vr.iter().zip(cr).map(|(v, c)| format!("{v:.2} ({})", c.name())).collect())
        .collect();
    let col_w: Vec<usize> = (0..t.cols.len())
        .map(|c| cells.iter().map(|r| r[c].len()).chain([t.cols[c].len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let _ = write!(s, "{:<label_w$}", "");
    for (c, w) in t.cols.iter().zip(&col_w) {
        let _ = write!(s, "  {c:>w$}");
    }
    s.push('\n');
    for (label, row) in t.rows.iter().zip(&cells) {
        let _ = write!(s, "{label:<label_w$}");
        for (cell, w) in row.iter().zip(&col_w) {
            let _ = write!(s, "  {cell:>w$}");
        }
        s.push('\n');
    }
    let sums: Vec<String> = t.rank_sums.iter().map(u32::to_string).collect();
    let _ = writeln!(s, "Rank-sum {}", sums.join(" "));
    s
}

/// CSV with a label column then one column per method.
pub fn write_matrix_csv<W: Write>(w: W, corner: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec![corner.to_owned()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in rows.iter().zip(values) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<matrix>", e))?;
    Ok(())
}

/// Inverse of [`write_matrix_csv`]: `(row labels, column labels, values)`.
pub fn read_matrix_csv<R: Read>(r: R) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(r);
    let cols: Vec<String> = r.headers()?.iter().skip(1).map(str::to_owned).collect();
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut it = rec.iter();
        rows.push(it.next().unwrap_or_default().to_owned());
        let row = it
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format(format!("not a number: `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != cols.len() {
            return Err(Error::Format(format!("row `{}` has {} values for {} columns", rows.last().unwrap(), row.len(), cols.len())));
        }
        values.push(row);
    }
    Ok((rows, cols, values))
}

/// Files written by [`render_report`].
#[derive(Clone, Debug, Default)]
pub struct ReportBundle {
    pub text: PathBuf,
    pub values_csv: PathBuf,
    pub colors_csv: PathBuf,
    pub curves_csv: Option<PathBuf>,
    pub window_files: Vec<PathBuf>,
}

/// A per-image window map to include in a report.
#[derive(Clone, Debug)]
pub struct VoteMap {
    pub image_id: String,
    pub windows: Vec<WindowPrediction>,
    pub patch_size: usize,
    pub window_cells: usize,
}

pub fn render_report(table: &RankTable, histories: &[HistoryRow], maps: &[VoteMap], out: &Path) -> Result<ReportBundle> {
    if table.values.len() != table.rows.len() || table.values.iter().any(|r| r.len() != table.cols.len()) {
        return Err(Error::contract("rank table labels do not match its matrix"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut text = render_text(table);
    let values_csv = out.join("rank_values.csv");
    write_matrix_csv(create(&values_csv)?, "config", &table.rows, &table.cols, &table.values)?;
    let colors_csv = out.join("rank_colors.csv");
    {
        let mut w = csv::Writer::from_writer(create(&colors_csv)?);
        let mut header = vec!["config".to_owned()];
        header.extend(table.cols.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in table.rows.iter().zip(&table.colors) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| c.name().to_owned()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&colors_csv, e))?;
    }
    let curves_csv = if histories.is_empty() {
        None
    } else {
        let p = out.join("curves.csv");
        crate::training::write_history(create(&p)?, histories)?;
        let _ = writeln!(text, "\nTraining curves: {} epochs recorded in curves.csv", histories.len());
        Some(p)
    };
    let mut window_files = Vec::new();
    for m in maps {
        let wp = out.join(format!("windows_{}.csv", m.image_id));
        write_windows_csv(create(&wp)?, &m.windows)?;
        let op = out.join(format!("overlay_{}.csv", m.image_id));
        write_overlay(create(&op)?, &m.windows, m.patch_size, m.window_cells)?;
        window_files.push(wp);
        window_files.push(op);
    }
    let tp = out.join("report.txt");
    fs::write(&tp, text).map_err(|e| Error::io(&tp, e))?;
    Ok(ReportBundle {
        text: tp,
        values_csv,
        colors_csv,
        curves_csv,
        window_files,
    })
}

fn create(p: &Path) -> Result<fs::File> {
    fs::File::create(p).map_err(|e| Error::io(p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_closed_form() {
        let preds = [0, 0, 0, 0];
        let truths = [0, 0, 1, 1];
        assert!((f1_per_class(&preds, &truths, 0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_per_class(&preds, &truths, 1).unwrap(), 0.0);
        assert_eq!(accuracy(&truths, &truths).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn ties_at_the_maximum_are_all_orange() {
        let t = rank_cells(&["r".into()], &["a".into(), "b".into()], &[vec![3.0, 3.0]]).unwrap();
        assert_eq!(t.rank_sums, vec![1, 1]);
    }

    #[test]
    fn bands_are_inclusive() {
        assert_eq!(Color::from_ratio(0.975), Color::Green);
        assert_eq!(Color::from_ratio(0.95), Color::Blue);
        assert_eq!(Color::from_ratio(0.9), Color::Yellow);
        assert_eq!(Color::from_ratio(0.85), Color::Red);
        assert_eq!(Color::from_ratio(0.8499), Color::None);
    }
}
