//! Base-2 cross-entropy losses. The base-2 logarithm rescales gradients by
//! `1/ln 2` relative to natural-log cross-entropy; minimisers are unchanged.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped here before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
const ROW_TOLERANCE: f64 = 1e-6;

fn check_rows(t: &Tensor, outer: usize, len: usize, inner: usize) -> Result<()> {
    let d = t.data();
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..len).map(|c| d[(o * len + c) * inner + i]).sum();
            if (s - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::contract(format!(
                    "probability row {o}/{i} sums to {s}, expected 1"
                )));
            }
        }
    }
    Ok(())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {l} outside {classes} classes")));
    }
    Ok(())
}

/// `−(1/K) Σ_k W^k log2 Y′[k, y_k]` on a `[K, C]` probability node.
/// `weights = None` means every `W^k = 1`.
pub fn classification_loss(
    g: &mut Graph,
    probs: Var,
    labels: &[usize],
    classes: usize,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let k = labels.len();
    if g.shape(probs) != [k, classes] {
        return Err(Error::dim(
            "loss_cls",
            format!("probabilities {:?} for {k} labels and {classes} classes", g.shape(probs)),
        ));
    }
    check_labels(labels, classes)?;
    check_rows(g.value(probs), k, classes, 1)?;
    let coeffs: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != k {
                return Err(Error::dim("loss_weighted", format!("{} weights for {k} samples", w.len())));
            }
            if let Some(bad) = w.iter().find(|&&w| !(w >= 1.0)) {
                return Err(Error::contract(format!("sample weight {bad} is below 1")));
            }
            w.iter().map(|w| -w / k as f64).collect()
        }
        None => vec![-1.0 / k as f64; k],
    };
    let index = labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect();
    let picked = g.gather(probs, index, &[k])?;
    let logs = g.log2(picked, PROB_FLOOR);
    g.weighted_sum(logs, coeffs)
}

/// Per-cell cross-entropy on a `[K, C, M, N]` map, averaged over the cells of
/// each image and then over images. `masks[k]` lists cell labels row-major.
pub fn segmentation_loss(g: &mut Graph, seg: Var, masks: &[&[usize]], classes: usize) -> Result<Var> {
    let shape = g.shape(seg).to_vec();
    let k = masks.len();
    if shape.len() != 4 || shape[0] != k || shape[1] != classes {
        return Err(Error::dim(
            "loss_seg",
            format!("map {shape:?} for {k} masks and {classes} classes"),
        ));
    }
    let cells = shape[2] * shape[3];
    check_rows(g.value(seg), k, classes, cells)?;
    let mut index = Vec::with_capacity(k * cells);
    for (b, m) in masks.iter().enumerate() {
        if m.len() != cells {
            return Err(Error::dim("loss_seg", format!("mask {b} has {} cells, map has {cells}", m.len())));
        }
        check_labels(m, classes)?;
        index.extend(m.iter().enumerate().map(|(c, &l)| (b * classes + l) * cells + c));
    }
    let picked = g.gather(seg, index, &[k * cells])?;
    let logs = g.log2(picked, PROB_FLOOR);
    g.weighted_sum(logs, vec![-1.0 / (k * cells) as f64; k * cells])
}

/// `α·cls + (1−α)·seg`.
pub fn joint_loss(g: &mut Graph, cls: Var, seg: Var, alpha_joint: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha_joint) {
        return Err(Error::contract(format!("alpha_joint {alpha_joint} outside [0, 1]")));
    }
    let a = g.scale(cls, alpha_joint);
    let b = g.scale(seg, 1.0 - alpha_joint);
    g.add(a, b)
}

/// `1/R_roi` when `R_roi > α`, otherwise `1/α`.
pub fn sample_weight(r_roi: f64, alpha_roi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r_roi) {
        return Err(Error::contract(format!("R_roi {r_roi} outside [0, 1]")));
    }
    if !(alpha_roi > 0.0 && alpha_roi <= 1.0) {
        return Err(Error::contract(format!("alpha_roi {alpha_roi} outside (0, 1]")));
    }
    Ok(if r_roi > alpha_roi { 1.0 / r_roi } else { 1.0 / alpha_roi })
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    Ok(g.value(v).item())
}

/// Value of the classification loss for `[K, C]` probabilities.
pub fn loss_cls(labels: &[usize], probs: &Tensor) -> Result<f64> {
    loss_weighted(labels, probs, None)
}

pub fn loss_weighted(labels: &[usize], probs: &Tensor, weights: Option<&[f64]>) -> Result<f64> {
    let classes = *probs.shape().last().ok_or_else(|| Error::contract("empty probabilities"))?;
    eval_scalar(|g| {
        let p = g.input(probs.clone());
        classification_loss(g, p, labels, classes, weights)
    })
}

pub fn loss_seg(masks: &[&[usize]], seg: &Tensor) -> Result<f64> {
    let classes = seg.shape().get(1).copied().unwrap_or(0);
    eval_scalar(|g| {
        let s = g.input(seg.clone());
        segmentation_loss(g, s, masks, classes)
    })
}

pub fn loss_joint(labels: &[usize], probs: &Tensor, masks: &[&[usize]], seg: &Tensor, alpha_joint: f64) -> Result<f64> {
    let classes = *probs.shape().last().ok_or_else(|| Error::contract("empty probabilities"))?;
    eval_scalar(|g| {
        let p = g.input(probs.clone());
        let s = g.input(seg.clone());
        let c = classification_loss(g, p, labels, classes, None)?;
        let l = segmentation_loss(g, s, masks, classes)?;
        joint_loss(g, c, l, alpha_joint)
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prediction_costs_two_bits() {
        let p = Tensor::full(vec![3, 4], 0.25);
        assert_eq!(loss_cls(&[0, 1, 3], &p).unwrap(), 2.0);
        let one = Tensor::full(vec![1, 4], 0.25);
        assert_eq!(loss_weighted(&[2], &one, Some(&[10.0])).unwrap(), 20.0);
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(loss_cls(&[0, 1], &p).unwrap(), 0.0);
    }

    #[test]
    fn unnormalised_rows_are_rejected() {
        let p = Tensor::full(vec![1, 4], 0.3);
        assert!(matches!(loss_cls(&[0], &p), Err(Error::Contract(_))));
    }

    #[test]
    fn sample_weight_branches() {
        assert_eq!(sample_weight(0.25, 0.10).unwrap(), 4.0);
        assert_eq!(sample_weight(0.05, 0.10).unwrap(), 10.0);
        assert_eq!(sample_weight(0.10, 0.10).unwrap(), 10.0);
        assert!(sample_weight(1.5, 0.10).is_err());
    }

    #[test]
    fn joint_of_uniform_heads() {
        let p = Tensor::full(vec![1, 4], 0.25);
        let s = Tensor::full(vec![1, 4, 2, 2], 0.25);
        let m = [0usize, 1, 2, 3];
        assert_eq!(loss_joint(&[1], &p, &[&m], &s, 0.5).unwrap(), 2.0);
    }
}
