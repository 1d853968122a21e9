//! Forward values of the kernels and losses against plain nested loops.
mod common;

use cact::tensor::{Graph, PoolKind, SoftmaxAxis, Tensor, BN_EPS};
use cact::training::{loss_cls, loss_joint, loss_seg, loss_weighted, sample_weight};
use common::*;
use rand::Rng;

const TOL: f64 = 1e-10;

fn run(inputs: &[Tensor], f: impl FnOnce(&mut Graph, &[cact::tensor::Var]) -> cact::tensor::Var) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).clone()
}

fn assert_close(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= TOL, "{what}[{i}]: {x} vs {y}");
    }
}

#[test]
fn conv_matches_loops() {
    let mut r = rng(20);
    for _ in 0..24 {
        let b = r.gen_range(1..=2);
        let c = r.gen_range(1..=4);
        let h = r.gen_range(3..=8);
        let w = r.gen_range(3..=8);
        let k = r.gen_range(1..=4);
        let kh = [1, 3][r.gen_range(0..2)];
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=kh / 2 + 1);
        let x = random(&[b, c, h, w], &mut r);
        let wt = random(&[k, c, kh, kh], &mut r);
        let bias = random(&[k], &mut r);
        let got = run(&[x.clone(), wt.clone(), bias.clone()], |g, v| g.conv2d(v[0], v[1], v[2], stride, pad).unwrap());
        let want = conv_naive(&x, &wt, &bias, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert_close(got.data(), want.data(), &format!("conv {b}x{c}x{h}x{w} k{kh} s{stride} p{pad}"));
    }
}

#[test]
fn pools_match_loops() {
    let mut r = rng(21);
    for _ in 0..12 {
        let shape = [r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=8), r.gen_range(1..=8)];
        let x = random(&shape, &mut r);
        let avg = run(&[x.clone()], |g, v| g.pool(v[0], PoolKind::GlobalAvg).unwrap());
        assert_close(avg.data(), &global_naive(&x, false), "global avg");
        let max = run(&[x.clone()], |g, v| g.pool(v[0], PoolKind::GlobalMax).unwrap());
        assert_close(max.data(), &global_naive(&x, true), "global max");
        let a3 = run(&[x.clone()], |g, v| g.pool(v[0], PoolKind::Avg3x3).unwrap());
        assert_close(a3.data(), avg3x3_naive(&x).data(), "avg 3x3");
    }
}

#[test]
fn batch_norm_matches_loops() {
    let mut r = rng(22);
    for _ in 0..8 {
        let shape = [2, r.gen_range(1..=4), r.gen_range(2..=8), r.gen_range(2..=8)];
        let c = shape[1];
        let x = random(&shape, &mut r);
        let gamma: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let mut running = Tensor::from_fn(vec![2, c], |i| if i < c { 0.0 } else { 1.0 });
        let got = run(&[x.clone(), Tensor::new(vec![c], gamma.clone()).unwrap(), Tensor::new(vec![c], beta.clone()).unwrap()], |g, v| {
            g.batch_norm(v[0], v[1], v[2], &mut running, true).unwrap()
        });
        assert_close(got.data(), bn_naive(&x, &gamma, &beta).data(), "batch norm");
        // running statistics move 10% toward the batch statistics (unbiased variance)
        let n = (shape[0] * shape[2] * shape[3]) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = (0..shape[0])
                .flat_map(|b| (0..shape[2]).flat_map(move |y| (0..shape[3]).map(move |xx| (b, y, xx))))
                .map(|(b, y, xx)| x.at4(b, ch, y, xx))
                .collect();
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
            assert!((running.data()[ch] - 0.1 * m).abs() < TOL);
            assert!((running.data()[c + ch] - (0.9 + 0.1 * var)).abs() < TOL);
        }
        // eval mode uses the stored statistics
        let got = run(&[x.clone(), Tensor::new(vec![c], gamma.clone()).unwrap(), Tensor::new(vec![c], beta.clone()).unwrap()], |g, v| {
            g.batch_norm(v[0], v[1], v[2], &mut running.clone(), false).unwrap()
        });
        let [b, _, h, w] = x.dims4();
        for i in 0..b * c * h * w {
            let ch = (i / (h * w)) % c;
            let want = gamma[ch] * (x.data()[i] - running.data()[ch]) / (running.data()[c + ch] + BN_EPS).sqrt() + beta[ch];
            assert!((got.data()[i] - want).abs() < TOL);
        }
    }
}

#[test]
fn softmax_matches_loops() {
    let mut r = rng(23);
    let x = random(&[2, 4, 3, 5], &mut r);
    let [b, c, h, w] = x.dims4();
    let ch = run(&[x.clone()], |g, v| g.softmax_map(v[0], SoftmaxAxis::Channel).unwrap());
    let sp = run(&[x.clone()], |g, v| g.softmax_map(v[0], SoftmaxAxis::Spatial).unwrap());
    for n in 0..b {
        for k in 0..c {
            let z: f64 = (0..h).flat_map(|y| (0..w).map(move |xx| (y, xx))).map(|(y, xx)| x.at4(n, k, y, xx).exp()).sum();
            for y in 0..h {
                for xx in 0..w {
                    let zc: f64 = (0..c).map(|a| x.at4(n, a, y, xx).exp()).sum();
                    assert!((ch.at4(n, k, y, xx) - x.at4(n, k, y, xx).exp() / zc).abs() < TOL);
                    assert!((sp.at4(n, k, y, xx) - x.at4(n, k, y, xx).exp() / z).abs() < TOL);
                }
            }
        }
    }
}

#[test]
fn dense_matches_loops() {
    let mut r = rng(24);
    let x = random(&[3, 5], &mut r);
    let w = random(&[5, 4], &mut r);
    let b = random(&[4], &mut r);
    let got = run(&[x.clone(), w.clone(), b.clone()], |g, v| g.dense(v[0], v[1], v[2]).unwrap());
    for i in 0..3 {
        for o in 0..4 {
            let want = b.data()[o] + (0..5).map(|k| x.data()[i * 5 + k] * w.data()[k * 4 + o]).sum::<f64>();
            assert!((got.data()[i * 4 + o] - want).abs() < TOL);
        }
    }
}

#[test]
fn losses_match_loops() {
    let mut r = rng(25);
    for _ in 0..10 {
        let k = r.gen_range(1..=4);
        let probs = random_probs(&[k, 4], &mut r);
        let labels: Vec<usize> = (0..k).map(|_| r.gen_range(0..4)).collect();
        assert!((loss_cls(&labels, &probs).unwrap() - cls_loss_naive(&labels, &probs, None)).abs() < TOL);
        let rois: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..=1.0)).collect();
        let w: Vec<f64> = rois.iter().map(|&q| sample_weight(q, 0.1).unwrap()).collect();
        assert!((loss_weighted(&labels, &probs, Some(&w)).unwrap() - cls_loss_naive(&labels, &probs, Some(&w))).abs() < TOL);

        let (m, n) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let seg = random_probs(&[k, 4, m, n], &mut r);
        let masks: Vec<Vec<usize>> = (0..k).map(|_| (0..m * n).map(|_| r.gen_range(0..4)).collect()).collect();
        let refs: Vec<&[usize]> = masks.iter().map(Vec::as_slice).collect();
        let s = loss_seg(&refs, &seg).unwrap();
        assert!((s - seg_loss_naive(&masks, &seg)).abs() < TOL);
        let alpha = r.gen_range(0.0..=1.0);
        let j = loss_joint(&labels, &probs, &refs, &seg, alpha).unwrap();
        let want = alpha * cls_loss_naive(&labels, &probs, None) + (1.0 - alpha) * seg_loss_naive(&masks, &seg);
        assert!((j - want).abs() < TOL);
    }
}

#[test]
fn full_roi_weighting_is_bit_identical_to_standard() {
    let mut r = rng(26);
    for _ in 0..20 {
        let k = r.gen_range(1..=8);
        let probs = random_probs(&[k, 4], &mut r);
        let labels: Vec<usize> = (0..k).map(|_| r.gen_range(0..4)).collect();
        let w = vec![sample_weight(1.0, 0.1).unwrap(); k];
        assert_eq!(loss_weighted(&labels, &probs, Some(&w)).unwrap().to_bits(), loss_cls(&labels, &probs).unwrap().to_bits());
    }
}

#[test]
fn sample_weight_piecewise() {
    assert_eq!(sample_weight(0.5, 0.1).unwrap(), 2.0);
    assert_eq!(sample_weight(0.1, 0.1).unwrap(), 10.0);
    assert_eq!(sample_weight(0.0, 0.1).unwrap(), 10.0);
    assert_eq!(sample_weight(0.25, 0.1).unwrap(), 4.0);
    assert!(sample_weight(1.5, 0.1).is_err());
    assert!(sample_weight(0.5, 0.0).is_err());
}
