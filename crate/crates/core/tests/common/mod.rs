//! Finite-difference checkers, naive loop oracles and small fixtures shared
//! by the integration tests.
#![allow(dead_code)]

use cact::context_net::{BlockKind, BlockWidths, ModelArch};
use cact::layers::Ctx;
use cact::local_repr::{ExtractorFamily, ExtractorSpec};
use cact::tensor::{Graph, ParamStore, Tensor, Var, BN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a tiny absolute floor, so entries whose true
/// gradient is zero (a bias feeding batch-norm) compare on absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

pub fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.1..1.0))
}

/// Worst relative error between backward and central differences for the
/// gradient of a scalar built from `inputs`.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss, &mut ParamStore::new()).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf grad").to_vec()).collect();
    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Worst relative error over every parameter element, with the loss built
/// in a training context. Returns the error and the worst parameter's name.
pub fn check_params(ps: &mut ParamStore, build: impl Fn(&mut Ctx) -> Var) -> (f64, String) {
    ps.zero_grads();
    {
        let mut ctx = Ctx::train(ps);
        let loss = build(&mut ctx);
        ctx.backward(loss).expect("scalar loss");
    }
    let analytic: Vec<Vec<f64>> = ps.params().iter().map(|p| p.tensor.grad.clone().unwrap()).collect();
    let eval = |ps: &mut ParamStore| {
        let mut ctx = Ctx::train(ps);
        let l = build(&mut ctx);
        ctx.graph.value(l).item()
    };
    let mut worst = (0.0, String::new());
    for i in 0..ps.params().len() {
        for j in 0..ps.params()[i].tensor.len() {
            let orig = ps.params()[i].tensor.data()[j];
            ps.params_mut()[i].tensor.data_mut()[j] = orig + FD_STEP;
            let up = eval(ps);
            ps.params_mut()[i].tensor.data_mut()[j] = orig - FD_STEP;
            let down = eval(ps);
            ps.params_mut()[i].tensor.data_mut()[j] = orig;
            let e = rel_err(analytic[i][j], (up - down) / (2.0 * FD_STEP));
            if e > worst.0 {
                worst = (e, ps.params()[i].name.clone());
            }
        }
    }
    worst
}

pub fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [bn, c, h, wd] = x.dims4();
    let [k, _, kh, kw] = w.dims4();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![bn, k, oh, ow]);
    for n in 0..bn {
        for o in 0..k {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data()[o];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at4(n, ci, iy as usize, ix as usize) * w.at4(o, ci, dy, dx);
                                }
                            }
                        }
                    }
                    out.data_mut()[((n * k + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

pub fn avg3x3_naive(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.dims4();
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (iy, ix) = (y as isize + dy, xx as isize + dx);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x.at4(n, ch, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[((n * c + ch) * h + y) * w + xx] = s / 9.0;
                }
            }
        }
    }
    out
}

pub fn global_naive(x: &Tensor, max: bool) -> Vec<f64> {
    let [b, c, h, w] = x.dims4();
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at4(n, ch, y, xx);
                    acc = if max { acc.max(v) } else { acc + v };
                }
            }
            out.push(if max { acc } else { acc / (h * w) as f64 });
        }
    }
    out
}

/// Training-mode batch-norm from explicit mean / biased-variance formulas.
pub fn bn_naive(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let [b, c, h, w] = x.dims4();
    let mut out = x.clone();
    for ch in 0..c {
        let mut vals = Vec::new();
        for n in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    vals.push(x.at4(n, ch, y, xx));
                }
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        for n in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let i = ((n * c + ch) * h + y) * w + xx;
                    out.data_mut()[i] = gamma[ch] * (x.data()[i] - m) / (var + BN_EPS).sqrt() + beta[ch];
                }
            }
        }
    }
    out
}

/// `−(1/K) Σ_k Σ_c W^k Y_c^k log2(max(Y′_c^k, 1e-12))` with one-hot `Y`.
pub fn cls_loss_naive(labels: &[usize], probs: &Tensor, weights: Option<&[f64]>) -> f64 {
    let k = labels.len();
    let c = probs.shape()[1];
    let mut total = 0.0;
    for s in 0..k {
        let w = weights.map_or(1.0, |w| w[s]);
        for class in 0..c {
            let y = if labels[s] == class { 1.0 } else { 0.0 };
            total += w * y * probs.data()[s * c + class].max(1e-12).log2();
        }
    }
    -total / k as f64
}

pub fn seg_loss_naive(masks: &[Vec<usize>], seg: &Tensor) -> f64 {
    let [k, c, m, n] = seg.dims4();
    let mut total = 0.0;
    for (s, mask) in masks.iter().enumerate().take(k) {
        let mut per_image = 0.0;
        for i in 0..m {
            for j in 0..n {
                for class in 0..c {
                    let y = if mask[i * n + j] == class { 1.0 } else { 0.0 };
                    per_image += y * seg.at4(s, class, i, j).max(1e-12).log2();
                }
            }
        }
        total += -per_image / (m * n) as f64;
    }
    total / k as f64
}

/// Rows that sum to one along axis 1 of a `[K, C, ..]` tensor.
pub fn random_probs(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = positive(shape, rng);
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let d = t.data_mut();
    for o in 0..shape[0] {
        for i in 0..inner {
            let s: f64 = (0..c).map(|a| d[(o * c + a) * inner + i]).sum();
            for a in 0..c {
                d[(o * c + a) * inner + i] /= s;
            }
        }
    }
    t
}

/// A model small enough for exhaustive finite differences.
pub fn tiny_arch(kind: BlockKind) -> ModelArch {
    ModelArch {
        extractor: ExtractorSpec {
            family: ExtractorFamily::Reference5,
            feature_depth: 3,
            patch_size: 16,
            base_width: 1,
            in_channels: 1,
        },
        widths: BlockWidths {
            b1: 3,
            b2_squeeze: 2,
            b2_expand: 2,
            b3: [1, 2, 1, 1],
        },
        classes: 4,
        ..ModelArch::default()
    }
    .with_kind(kind)
}

/// Finite-difference error of every differentiable op on randomized small
/// shapes, as `(case, worst relative error)`.
pub fn op_gradient_suite(seed: u64) -> Vec<(String, f64)> {
    use cact::tensor::{PoolKind, SoftmaxAxis};
    let mut r = rng(seed);
    let mut out = Vec::new();
    // a random linear read-out makes every output element matter
    let readout = |g: &mut Graph, v: Var, seed: u64| {
        let n = g.value(v).len();
        let mut rr = rng(seed);
        let coeffs = (0..n).map(|_| rr.gen_range(-1.0..1.0)).collect();
        g.weighted_sum(v, coeffs).unwrap()
    };
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = random(&[2, 3, 6, 5], &mut r);
        let w = random(&[4, 3, 3, 3], &mut r);
        let b = random(&[4], &mut r);
        let e = check_inputs(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            readout(g, y, 1)
        });
        out.push((format!("conv2d stride {stride} pad {pad}"), e));
    }
    {
        let x = random(&[2, 3, 4, 4], &mut r);
        let gamma = random(&[3], &mut r);
        let beta = random(&[3], &mut r);
        let e = check_inputs(&[x, gamma, beta], |g, v| {
            let mut running = Tensor::zeros(vec![2, 3]);
            let y = g.batch_norm(v[0], v[1], v[2], &mut running, true).unwrap();
            readout(g, y, 2)
        });
        out.push(("batch_norm (training)".into(), e));
        let x = random(&[2, 3, 4, 4], &mut r);
        let gamma = random(&[3], &mut r);
        let beta = random(&[3], &mut r);
        let e = check_inputs(&[x, gamma, beta], |g, v| {
            let mut running = Tensor::from_fn(vec![2, 3], |i| if i < 3 { 0.1 * i as f64 } else { 0.5 + i as f64 });
            let y = g.batch_norm(v[0], v[1], v[2], &mut running, false).unwrap();
            readout(g, y, 3)
        });
        out.push(("batch_norm (eval)".into(), e));
    }
    let x = random(&[2, 3, 4, 4], &mut r);
    out.push(("relu".into(), check_inputs(&[x.clone()], |g, v| {
        let y = g.relu(v[0]);
        readout(g, y, 4)
    })));
    out.push(("leaky_relu".into(), check_inputs(&[x.clone()], |g, v| {
        let y = g.leaky_relu(v[0], 0.01);
        readout(g, y, 5)
    })));
    for axis in 0..4 {
        out.push((format!("softmax axis {axis}"), check_inputs(&[x.clone()], |g, v| {
            let y = g.softmax(v[0], axis).unwrap();
            readout(g, y, 6)
        })));
    }
    for (name, a) in [("spatial", SoftmaxAxis::Spatial), ("channel", SoftmaxAxis::Channel)] {
        out.push((format!("softmax map {name}"), check_inputs(&[x.clone()], |g, v| {
            let y = g.softmax_map(v[0], a).unwrap();
            readout(g, y, 7)
        })));
    }
    for kind in [PoolKind::GlobalAvg, PoolKind::GlobalMax, PoolKind::Avg3x3] {
        out.push((format!("pool {kind:?}"), check_inputs(&[x.clone()], |g, v| {
            let y = g.pool(v[0], kind).unwrap();
            readout(g, y, 8)
        })));
    }
    {
        let a = random(&[3, 5], &mut r);
        let w = random(&[5, 4], &mut r);
        let b = random(&[4], &mut r);
        out.push(("dense".into(), check_inputs(&[a, w, b], |g, v| {
            let y = g.dense(v[0], v[1], v[2]).unwrap();
            readout(g, y, 9)
        })));
    }
    {
        let a = random(&[2, 2, 3, 3], &mut r);
        let b = random(&[2, 3, 3, 3], &mut r);
        out.push(("concat".into(), check_inputs(&[a, b], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1).unwrap();
            readout(g, y, 10)
        })));
        let c = random(&[2, 2, 3, 3], &mut r);
        let d = random(&[2, 2, 3, 3], &mut r);
        out.push(("hadamard".into(), check_inputs(&[c.clone(), d.clone()], |g, v| {
            let y = g.hadamard(v[0], v[1]).unwrap();
            readout(g, y, 11)
        })));
        out.push(("add".into(), check_inputs(&[c.clone(), d], |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            readout(g, y, 12)
        })));
        out.push(("reshape + crop".into(), check_inputs(&[c.clone()], |g, v| {
            let y = g.crop(v[0], 1, 0, 2, 2).unwrap();
            let z = g.reshape(y, &[2, 8]).unwrap();
            readout(g, z, 13)
        })));
        out.push(("log2 + scale + sum".into(), check_inputs(&[positive(&[2, 3], &mut r)], |g, v| {
            let y = g.log2(v[0], 1e-12);
            let z = g.scale(y, -0.7);
            g.sum(z)
        })));
    }
    out
}

/// Finite-difference error of the whole aggregation network, for every
/// block kind and strategy, on `[2, d, s, s]` cubes.
pub fn model_gradient_suite(sizes: &[usize], seed: u64) -> Vec<(String, f64)> {
    use cact::context_net::ContextModel;
    use cact::training::{strategy_loss, Strategy, StrategyKind};
    let mut out = Vec::new();
    for kind in [BlockKind::B1, BlockKind::B2, BlockKind::B3] {
        for sk in StrategyKind::ALL {
            for &s in sizes {
                let strategy = Strategy::new(sk);
                let arch = strategy.apply(&tiny_arch(kind));
                let mut model = ContextModel::new(&arch, seed).unwrap();
                let mut r = rng(seed ^ s as u64);
                let cube = random(&[2, arch.extractor.feature_depth, s, s], &mut r);
                let labels = vec![r.gen_range(0..4), r.gen_range(0..4)];
                let masks: Vec<Vec<usize>> = (0..2).map(|_| (0..s * s).map(|_| r.gen_range(0..4)).collect()).collect();
                let roi: Vec<f64> = masks
                    .iter()
                    .map(|m| m.iter().filter(|&&c| c != 0).count() as f64 / m.len() as f64)
                    .collect();
                let mut ps = std::mem::take(&mut model.params);
                let (e, worst) = check_params(&mut ps, |ctx| {
                    let x = ctx.graph.input(cube.clone());
                    let o = model.forward_cube(ctx, x).unwrap();
                    let mrefs: Vec<&[usize]> = masks.iter().map(Vec::as_slice).collect();
                    strategy_loss(&mut ctx.graph, &o, &labels, &mrefs, &roi, 4, &strategy).unwrap()
                });
                out.push((format!("{kind:?} {} {s}x{s} (worst {worst})", sk.name()), e));
            }
        }
    }
    out
}

/// Finite-difference error through the extractor as well, for each family,
/// from pixels to the standard loss.
pub fn extractor_gradient_suite(seed: u64) -> Vec<(String, f64)> {
    use cact::context_net::ContextModel;
    use cact::training::{classification_loss, Strategy};
    let mut out = Vec::new();
    for family in [ExtractorFamily::Reference5, ExtractorFamily::CompactResidual, ExtractorFamily::CompactInception] {
        let mut arch = Strategy::default().apply(&tiny_arch(BlockKind::B1));
        arch.extractor.family = family;
        arch.extractor.feature_depth = 4;
        arch.extractor.base_width = 2;
        let mut model = ContextModel::new(&arch, seed).unwrap();
        let mut r = rng(seed);
        let images = [random(&[1, 32, 32], &mut r), random(&[1, 32, 32], &mut r)];
        let labels = [1, 3];
        let mut ps = std::mem::take(&mut model.params);
        let (e, worst) = check_params(&mut ps, |ctx| {
            let refs: Vec<&Tensor> = images.iter().collect();
            let o = model.forward_images(ctx, &refs).unwrap();
            classification_loss(&mut ctx.graph, o.probs, &labels, 4, None).unwrap()
        });
        out.push((format!("{family:?} extractor (worst {worst})"), e));
    }
    out
}

/// A 128×128, 16-pixel-patch version of the default synthetic dataset.
pub fn small_synthetic(per_class: usize, seed: u64) -> cact::data::SyntheticSpec {
    cact::data::SyntheticSpec {
        image_size: 128,
        patch_size: 16,
        per_class: [per_class; 4],
        ring_radius: 4.3,
        blob_density: 10,
        blob_sigma: 0.8,
        distortion: 0.4,
        seed,
        ..Default::default()
    }
}

/// Generated into `dir` and opened.
pub fn small_dataset(dir: &std::path::Path, per_class: usize, seed: u64) -> cact::data::Dataset {
    cact::data::generate(&small_synthetic(per_class, seed), dir).expect("generation");
    cact::data::Dataset::open(dir, 16).expect("valid dataset")
}

/// Quick to train on 128×128 images.
pub fn small_arch() -> ModelArch {
    ModelArch {
        extractor: ExtractorSpec {
            family: ExtractorFamily::Reference5,
            feature_depth: 4,
            patch_size: 16,
            base_width: 2,
            in_channels: 1,
        },
        widths: BlockWidths {
            b1: 4,
            b2_squeeze: 2,
            b2_expand: 4,
            b3: [2, 2, 2, 2],
        },
        ..ModelArch::default().with_kind(BlockKind::B1)
    }
}
