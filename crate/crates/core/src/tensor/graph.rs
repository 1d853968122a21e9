use std::f64::consts::LN_2;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::{expect_rank, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    GlobalAvg,
    GlobalMax,
    /// 3×3 window, stride 1, zero padding 1 (spatial size preserved).
    Avg3x3,
}

/// Softmax grouping for 4-D `[B, C, H, W]` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Normalise over the channel axis independently at every position.
    Channel,
    /// Normalise over all `H·W` positions independently per channel.
    Spatial,
}

/// Recorded operation plus what its backward pass needs.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    BatchNorm { mean: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Relu,
    LeakyRelu { slope: f64 },
    Softmax { outer: usize, len: usize, inner: usize },
    GlobalAvgPool,
    GlobalMaxPool { argmax: Vec<usize> },
    AvgPool3x3,
    Dense,
    Concat { axis: usize },
    Hadamard,
    Add,
    Reshape,
    Gather { index: Vec<usize> },
    Log2 { floor: f64 },
    WeightedSum { coeffs: Vec<f64> },
    Sum,
    Scale { factor: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Softmax { .. } => "softmax",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::AvgPool3x3 => "avg_pool3x3",
            Op::Dense => "dense",
            Op::Concat { .. } => "concat",
            Op::Hadamard => "hadamard",
            Op::Add => "add",
            Op::Reshape => "reshape",
            Op::Gather { .. } => "gather",
            Op::Log2 { .. } => "log2",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum => "sum",
            Op::Scale { .. } => "scale",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Tape of operations in creation (hence topological) order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Accumulated gradient of a leaf created with [`Graph::input_with_grad`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, vec![])
    }

    pub fn input_with_grad(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        t.grad = None;
        let v = self.push(t, Op::Leaf, vec![]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Copies a parameter into the graph; `backward` routes its gradient back
    /// into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = &store.param(id).tensor;
        let t = Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("valid parameter");
        let v = self.push(t, Op::Leaf, vec![]);
        let node = &mut self.nodes[v.0];
        node.param = Some(id);
        node.needs_grad = true;
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, b, stride, padding)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let t = Tensor::new(vec![geom.batch, geom.out_c, geom.oh, geom.ow], out)?;
        Ok(self.push(t, Op::Conv2d { stride, padding }, vec![x, w, b]))
    }

    fn conv_geom(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        expect_rank("conv2d", xv, 4)?;
        expect_rank("conv2d", wv, 4)?;
        let [batch, in_c, h, wd] = xv.dims4();
        let [out_c, wc, kh, kw] = wv.dims4();
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        if wc != in_c {
            return Err(Error::dim(
                "conv2d",
                format!("input channel axis (1) has {in_c}, weight axis 1 has {wc}"),
            ));
        }
        if bv.shape() != [out_c] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?} does not match weight axis 0 ({out_c})", bv.shape()),
            ));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{} on axes (2, 3)", h + 2 * pad, wd + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            batch,
            in_c,
            h,
            w: wd,
            out_c,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// Batch normalisation over every axis except 1. `running` is a `[2, C]`
    /// buffer (mean row, variance row) updated in training mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut Tensor,
        training: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(Error::dim("batch_norm", format!("need rank >= 2, got {:?}", xv.shape())));
        }
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        let inner: usize = xv.shape()[2..].iter().product();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dim("batch_norm", format!("affine params must have shape [{c}]")));
        }
        if running.shape() != [2, c] {
            return Err(Error::dim("batch_norm", format!("running stats must have shape [2, {c}]")));
        }
        let n = b * inner;
        if training && n < 2 {
            return Err(Error::DegenerateBatch {
                op: "batch_norm",
                detail: format!("each channel has a single element (shape {:?})", xv.shape()),
            });
        }
        let data = xv.data();
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        if training {
            for ch in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += data[(bi * c + ch) * inner..(bi * c + ch + 1) * inner].iter().sum::<f64>();
                }
                let m = s / n as f64;
                let mut ss = 0.0;
                for bi in 0..b {
                    for v in &data[(bi * c + ch) * inner..(bi * c + ch + 1) * inner] {
                        ss += (v - m) * (v - m);
                    }
                }
                let var = ss / n as f64;
                mean[ch] = m;
                inv_std[ch] = 1.0 / (var + BN_EPS).sqrt();
                let rd = running.data_mut();
                rd[ch] = (1.0 - BN_MOMENTUM) * rd[ch] + BN_MOMENTUM * m;
                rd[c + ch] = (1.0 - BN_MOMENTUM) * rd[c + ch] + BN_MOMENTUM * var * n as f64 / (n - 1) as f64;
            }
        } else {
            let rd = running.data();
            for ch in 0..c {
                mean[ch] = rd[ch];
                inv_std[ch] = 1.0 / (rd[c + ch] + BN_EPS).sqrt();
            }
        }
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0; data.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                for (o, v) in out[r.clone()].iter_mut().zip(&data[r]) {
                    *o = g[ch] * (v - mean[ch]) * inv_std[ch] + be[ch];
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::BatchNorm { mean, inv_std, training }, vec![x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.max(0.0)).collect())
            .expect("same shape");
        self.push(t, Op::Relu, vec![x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::LeakyRelu { slope }, vec![x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {:?}", xv.shape())));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let len = xv.shape()[axis];
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let data = xv.data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| data[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (data[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] /= z;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { outer, len, inner }, vec![x]))
    }

    /// Softmax of a `[B, C, H, W]` map, grouped per [`SoftmaxAxis`].
    pub fn softmax_map(&mut self, x: Var, axis: SoftmaxAxis) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("softmax_map", format!("expected rank 4, got {shape:?}")));
        }
        match axis {
            SoftmaxAxis::Channel => self.softmax(x, 1),
            SoftmaxAxis::Spatial => {
                let flat = self.reshape(x, &[shape[0], shape[1], shape[2] * shape[3]])?;
                let s = self.softmax(flat, 2)?;
                self.reshape(s, &shape)
            }
        }
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("pool", xv, 4)?;
        let [b, c, h, w] = xv.dims4();
        let data = xv.data();
        let plane = h * w;
        match kind {
            PoolKind::GlobalAvg => {
                let out = data.chunks_exact(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
                let t = Tensor::new(vec![b, c, 1, 1], out)?;
                Ok(self.push(t, Op::GlobalAvgPool, vec![x]))
            }
            PoolKind::GlobalMax => {
                let mut argmax = Vec::with_capacity(b * c);
                let mut out = Vec::with_capacity(b * c);
                for p in data.chunks_exact(plane) {
                    let a = Tensor::argmax(p);
                    argmax.push(a);
                    out.push(p[a]);
                }
                let t = Tensor::new(vec![b, c, 1, 1], out)?;
                Ok(self.push(t, Op::GlobalMaxPool { argmax }, vec![x]))
            }
            PoolKind::Avg3x3 => {
                let out = kernels::avg_pool3x3(data, b * c, h, w);
                let t = Tensor::new(vec![b, c, h, w], out)?;
                Ok(self.push(t, Op::AvgPool3x3, vec![x]))
            }
        }
    }

    /// `x [B, D] · w [D, C] + b [C]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        expect_rank("dense", xv, 2)?;
        expect_rank("dense", wv, 2)?;
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let (wd, c) = (wv.shape()[0], wv.shape()[1]);
        if wd != d {
            return Err(Error::dim("dense", format!("input axis 1 has {d}, weight axis 0 has {wd}")));
        }
        if bv.shape() != [c] {
            return Err(Error::dim("dense", format!("bias shape {:?} != [{c}]", bv.shape())));
        }
        let mut out = vec![0.0; n * c];
        kernels::gemm(n, d, c, xv.data(), false, wv.data(), false, &mut out, false);
        for row in out.chunks_exact_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, Op::Dense, vec![x, w, b]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} disagrees with {base:?} off the concat axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let a = self.shape(*v)[axis];
                out.extend_from_slice(&self.value(*v).data()[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { axis }, inputs.to_vec()))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Hadamard, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add, vec![a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())
            .map_err(|_| Error::dim("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))))?;
        Ok(self.push(t, Op::Reshape, vec![x]))
    }

    /// `out[i] = x[index[i]]`, viewed with `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather", format!("index {bad} out of range for {n} elements")));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Gather { index }, vec![x]))
    }

    /// Spatial crop `[.., top..top+h, left..left+w]` of a 4-D map.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let [b, c, hh, ww] = {
            let v = self.value(x);
            expect_rank("crop", v, 4)?;
            v.dims4()
        };
        if top + h > hh || left + w > ww {
            return Err(Error::dim("crop", format!("window {h}x{w} at ({top},{left}) exceeds {hh}x{ww}")));
        }
        let mut index = Vec::with_capacity(b * c * h * w);
        for p in 0..b * c {
            for i in top..top + h {
                for j in left..left + w {
                    index.push((p * hh + i) * ww + j);
                }
            }
        }
        self.gather(x, index, &[b, c, h, w])
    }

    /// `log2(max(x, floor))`.
    pub fn log2(&mut self, x: Var, floor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(floor).log2()).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Log2 { floor }, vec![x])
    }

    /// Scalar `Σ coeffs[i] · x[i]`.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Vec<f64>) -> Result<Var> {
        if coeffs.len() != self.value(x).len() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{} coefficients for {} values", coeffs.len(), self.value(x).len()),
            ));
        }
        let s = self.value(x).data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { coeffs }, vec![x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        self.push(t, Op::Scale { factor }, vec![x])
    }

    /// Reverse pass from a scalar. Parameter gradients accumulate into
    /// `params`; gradients of [`Graph::input_with_grad`] leaves accumulate on
    /// the leaf itself.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(pid) = node.param {
                    params.accumulate_grad(pid, &g);
                } else {
                    let leaf = &mut self.nodes[i].value;
                    match leaf.grad.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => leaf.grad = Some(g),
                    }
                }
                continue;
            }
            let input_grads = self.local_backward(i, &g);
            let inputs = self.nodes[i].inputs.clone();
            for (inp, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match grads[inp.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => grads[inp.0] = Some(ig),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let node = &self.nodes[i];
        let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { stride, padding } => {
                let geom = self
                    .conv_geom(node.inputs[0], node.inputs[1], node.inputs[2], *stride, *padding)
                    .expect("validated in forward");
                let cg = kernels::conv2d_backward(inp(0).data(), inp(1).data(), g, &geom, [need[0], need[1], need[2]]);
                vec![cg.input, cg.weight, cg.bias]
            }
            Op::BatchNorm { mean, inv_std, training } => {
                let x = inp(0);
                let gamma = inp(1).data();
                let (b, c) = (x.shape()[0], x.shape()[1]);
                let inner: usize = x.shape()[2..].iter().product();
                let n = (b * inner) as f64;
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for bi in 0..b {
                        let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                        for (dy, xv) in g[r.clone()].iter().zip(&x.data()[r]) {
                            let xhat = (xv - mean[ch]) * inv_std[ch];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    for bi in 0..b {
                        let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
                        for (k, (dy, xv)) in g[r.clone()].iter().zip(&x.data()[r.clone()]).enumerate() {
                            let xhat = (xv - mean[ch]) * inv_std[ch];
                            dx[r.start + k] = if *training {
                                gamma[ch] * inv_std[ch] / n * (n * dy - sum_dy - xhat * sum_dy_xhat)
                            } else {
                                gamma[ch] * inv_std[ch] * dy
                            };
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::Relu => {
                let dx = g.iter().zip(inp(0).data()).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect();
                vec![Some(dx)]
            }
            Op::LeakyRelu { slope } => {
                let dx = g
                    .iter()
                    .zip(inp(0).data())
                    .map(|(d, x)| if *x > 0.0 { *d } else { slope * d })
                    .collect();
                vec![Some(dx)]
            }
            Op::Softmax { outer, len, inner } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..*len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..*len {
                            dx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::GlobalAvgPool => {
                let [_, _, h, w] = inp(0).dims4();
                let plane = h * w;
                let mut dx = Vec::with_capacity(inp(0).len());
                for gv in g {
                    dx.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                vec![Some(dx)]
            }
            Op::GlobalMaxPool { argmax } => {
                let [_, _, h, w] = inp(0).dims4();
                let plane = h * w;
                let mut dx = vec![0.0; inp(0).len()];
                for (p, (gv, a)) in g.iter().zip(argmax).enumerate() {
                    dx[p * plane + a] = *gv;
                }
                vec![Some(dx)]
            }
            Op::AvgPool3x3 => {
                // the zero-padded 3×3 box filter is self-adjoint
                let [b, c, h, w] = inp(0).dims4();
                vec![Some(kernels::avg_pool3x3(g, b * c, h, w))]
            }
            Op::Dense => {
                let (x, w) = (inp(0), inp(1));
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let c = w.shape()[1];
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(n, c, d, g, false, w.data(), true, &mut dx, false);
                    dx
                });
                let dw = need[1].then(|| {
                    let mut dw = vec![0.0; d * c];
                    kernels::gemm(d, n, c, x.data(), true, g, false, &mut dw, false);
                    dw
                });
                let db = need[2].then(|| {
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    db
                });
                vec![dx, dw, db]
            }
            Op::Concat { axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.inputs.len());
                for (k, v) in node.inputs.iter().enumerate() {
                    let a = self.nodes[v.0].value.shape()[*axis];
                    if need[k] {
                        let mut dx = Vec::with_capacity(outer * a * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[start..start + a * inner]);
                        }
                        res.push(Some(dx));
                    } else {
                        res.push(None);
                    }
                    offset += a;
                }
                res
            }
            Op::Hadamard => {
                let (a, b) = (inp(0).data(), inp(1).data());
                let da = need[0].then(|| g.iter().zip(b).map(|(d, y)| d * y).collect());
                let db = need[1].then(|| g.iter().zip(a).map(|(d, x)| d * x).collect());
                vec![da, db]
            }
            Op::Add => vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())],
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Gather { index } => {
                let mut dx = vec![0.0; inp(0).len()];
                for (gv, &i) in g.iter().zip(index) {
                    dx[i] += gv;
                }
                vec![Some(dx)]
            }
            Op::Log2 { floor } => {
                let dx = g
                    .iter()
                    .zip(inp(0).data())
                    .map(|(d, x)| if *x > *floor { d / (x * LN_2) } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            }
            Op::WeightedSum { coeffs } => vec![Some(coeffs.iter().map(|c| c * g[0]).collect())],
            Op::Sum => vec![Some(vec![g[0]; inp(0).len()])],
            Op::Scale { factor } => vec![Some(g.iter().map(|d| d * factor).collect())],
        }
    }
}
