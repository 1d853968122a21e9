//! Whole-image grading: encode every patch once, slide the aggregation
//! network over windows of the cached cube, and vote.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::context_net::ContextModel;
use crate::data::{BACKGROUND, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::local_repr::{grid_dims, stack_patches, PatchClassifier};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub window_cells: usize,
    pub stride_cells: usize,
    /// Cube extents the plan was made for.
    pub rows: usize,
    pub cols: usize,
    /// Row-major `(top, left)` cube offsets.
    pub offsets: Vec<(usize, usize)>,
}

fn axis_offsets(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=len - window).step_by(stride).collect();
    let last = *v.last().expect("window fits");
    if last + window < len {
        // clamp a trailing partial window so it abuts the edge
        v.push(len - window);
    }
    v
}

/// Window offsets at `stride_cells`, clamping the last window on each axis.
pub fn plan_windows(rows: usize, cols: usize, window_cells: usize, stride_cells: usize) -> Result<WindowPlan> {
    if window_cells == 0 || stride_cells == 0 {
        return Err(Error::contract("window and stride must be >= 1 cell"));
    }
    if window_cells > rows || window_cells > cols {
        return Err(Error::contract(format!(
            "window of {window_cells} cells exceeds the {rows}x{cols} cube"
        )));
    }
    let ys = axis_offsets(rows, window_cells, stride_cells);
    let xs = axis_offsets(cols, window_cells, stride_cells);
    let offsets = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    Ok(WindowPlan {
        window_cells,
        stride_cells,
        rows,
        cols,
        offsets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Outcome {
    /// Winning class index (never background).
    Grade(usize),
    NoGlandularRegion,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Grade(c) => CLASS_NAMES.get(c).copied().unwrap_or("unknown"),
            Outcome::NoGlandularRegion => "no_glandular_region",
        }
    }

    /// Class index with the no-tissue outcome mapped to background.
    pub fn as_class(self) -> usize {
        match self {
            Outcome::Grade(c) => c,
            Outcome::NoGlandularRegion => BACKGROUND,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteResult {
    pub window_classes: Vec<usize>,
    /// Votes per class; the background entry is counted but never wins.
    pub tally: Vec<usize>,
    pub outcome: Outcome,
    pub tie: bool,
}

/// Plurality over non-background predictions; ties go to the higher grade.
pub fn vote(window_classes: &[usize], classes: usize) -> VoteResult {
    let mut tally = vec![0; classes.max(1)];
    for &c in window_classes {
        if c < tally.len() {
            tally[c] += 1;
        }
    }
    let best = tally.iter().enumerate().filter(|&(c, _)| c != BACKGROUND).map(|(_, &n)| n).max().unwrap_or(0);
    let (outcome, tie) = if best == 0 {
        (Outcome::NoGlandularRegion, false)
    } else {
        let winners: Vec<usize> = (0..tally.len()).filter(|&c| c != BACKGROUND && tally[c] == best).collect();
        (Outcome::Grade(*winners.last().expect("non-empty")), winners.len() > 1)
    };
    VoteResult {
        window_classes: window_classes.to_vec(),
        tally,
        outcome,
        tie,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowPrediction {
    pub top: usize,
    pub left: usize,
    pub class: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Grading {
    pub plan: WindowPlan,
    pub windows: Vec<WindowPrediction>,
    pub vote: VoteResult,
    /// Patches run through the extractor for this image.
    pub extractor_forwards: usize,
}

fn crop_cube(grid: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let [b, d, m, n] = grid.dims4();
    if b != 1 || top + size > m || left + size > n {
        return Err(Error::dim("crop_cube", format!("{size}x{size} at ({top},{left}) of {m}x{n}")));
    }
    let mut data = Vec::with_capacity(d * size * size);
    for c in 0..d {
        for i in top..top + size {
            let base = (c * m + i) * n;
            data.extend_from_slice(&grid.data()[base + left..base + left + size]);
        }
    }
    Tensor::new(vec![1, d, size, size], data)
}

/// Encodes the image once and classifies every window from the cached cube.
pub fn grade_image(model: &ContextModel, image: &Tensor, window_cells: usize, stride_cells: usize) -> Result<Grading> {
    let before = model.extractor.forward_count();
    let cube = model.encode(image, "")?;
    let extractor_forwards = model.extractor.forward_count() - before;
    let plan = plan_windows(cube.rows(), cube.cols(), window_cells, stride_cells)?;
    let windows = plan
        .offsets
        .par_iter()
        .map(|&(top, left)| {
            let slice = crop_cube(&cube.grid, top, left, window_cells)?;
            let p = model.predict_cube(&slice)?;
            Ok(WindowPrediction {
                top,
                left,
                class: p.class,
                probs: p.probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<usize> = windows.iter().map(|w| w.class).collect();
    Ok(Grading {
        vote: vote(&classes, model.classes()),
        plan,
        windows,
        extractor_forwards,
    })
}

/// Reference path: every window's pixels are re-encoded from scratch.
pub fn grade_windows_naive(model: &ContextModel, image: &Tensor, plan: &WindowPlan) -> Result<Vec<WindowPrediction>> {
    let p = model.arch.extractor.patch_size;
    let (padded, m, n) = stack_patches(&[image], p)?;
    if (m, n) != (plan.rows, plan.cols) {
        return Err(Error::contract("plan does not match the image grid"));
    }
    let c = image.shape()[0];
    let w = plan.window_cells;
    let per = c * p * p;
    plan.offsets
        .iter()
        .map(|&(top, left)| {
            // reassemble the window's pixels from its patches
            let mut crop = Tensor::zeros(vec![c, w * p, w * p]);
            let side = w * p;
            let cd = crop.data_mut();
            for i in 0..w {
                for j in 0..w {
                    let k = (top + i) * n + left + j;
                    let src = &padded.data()[k * per..(k + 1) * per];
                    for ch in 0..c {
                        for y in 0..p {
                            let dst = (ch * side + i * p + y) * side + j * p;
                            cd[dst..dst + p].copy_from_slice(&src[(ch * p + y) * p..(ch * p + y + 1) * p]);
                        }
                    }
                }
            }
            let pred = model.predict_image(&crop)?;
            Ok(WindowPrediction {
                top,
                left,
                class: pred.class,
                probs: pred.probs,
            })
        })
        .collect()
}

/// Patch-only baseline: classify each patch alone, then vote.
pub fn patch_vote(classifier: &PatchClassifier, image: &Tensor) -> Result<VoteResult> {
    let (patches, _, _) = stack_patches(&[image], classifier.extractor.spec().patch_size)?;
    let preds = classifier.predict(&patches)?;
    Ok(vote(&preds, classifier.classes))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub windows: usize,
    /// Multiply-accumulates of the one-pass extractor stage.
    pub extractor_macs: u64,
    /// Multiply-accumulates of the aggregation network over all windows.
    pub context_macs: u64,
    pub overhead_ratio: f64,
}

impl std::fmt::Display for CostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "grid {}x{}, {} windows: extractor {} MACs, context {} MACs, overhead {:.4}",
            self.grid_rows, self.grid_cols, self.windows, self.extractor_macs, self.context_macs, self.overhead_ratio
        )
    }
}

pub fn cost_report(
    height: usize,
    width: usize,
    patch_size: usize,
    window_cells: usize,
    stride_cells: usize,
    model: &ContextModel,
) -> Result<CostReport> {
    if patch_size != model.arch.extractor.patch_size {
        return Err(Error::Config(format!(
            "cost report for patch {patch_size} but the model uses {}",
            model.arch.extractor.patch_size
        )));
    }
    let (m, n) = grid_dims(height, width, patch_size);
    let plan = plan_windows(m, n, window_cells, stride_cells)?;
    let extractor_macs = (m * n) as u64 * model.extractor.macs_per_patch();
    let context_macs = plan.offsets.len() as u64 * model.context_macs(window_cells, window_cells);
    Ok(CostReport {
        grid_rows: m,
        grid_cols: n,
        windows: plan.offsets.len(),
        extractor_macs,
        context_macs,
        overhead_ratio: context_macs as f64 / extractor_macs as f64,
    })
}

/// `row,col,class,p_<class>..` per window.
pub fn write_windows_csv<W: Write>(w: W, windows: &[WindowPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let classes = windows.first().map_or(0, |p| p.probs.len());
    let mut header = vec!["row".to_owned(), "col".into(), "class".into()];
    header.extend((0..classes).map(|c| format!("p_{}", CLASS_NAMES.get(c).copied().unwrap_or("?"))));
    w.write_record(&header)?;
    for p in windows {
        let mut rec = vec![p.top.to_string(), p.left.to_string(), CLASS_NAMES[p.class].to_owned()];
        rec.extend(p.probs.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<windows>", e))?;
    Ok(())
}

pub fn overlay_color(class: usize) -> &'static str {
    match class {
        1 => "green",
        2 => "blue",
        3 => "red",
        _ => "none",
    }
}

/// Rectangles in pixel coordinates, one per window, for drawing over the image.
pub fn write_overlay<W: Write>(w: W, windows: &[WindowPrediction], patch_size: usize, window_cells: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["x", "y", "width", "height", "class", "color"])?;
    let side = (patch_size * window_cells).to_string();
    for p in windows {
        w.write_record([
            (p.left * patch_size).to_string(),
            (p.top * patch_size).to_string(),
            side.clone(),
            side.clone(),
            CLASS_NAMES[p.class].to_owned(),
            overlay_color(p.class).to_owned(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<overlay>", e))?;
    Ok(())
}
