//! Parameterised layers shared by the extractor and the context network.

use crate::error::{Error, Result};
use crate::tensor::{BufferId, Graph, InitKind, ParamId, ParamStore, Tensor, Var};

enum Store<'a> {
    Mut(&'a mut ParamStore),
    Shared(&'a ParamStore),
}

/// A forward pass in progress: the graph being recorded plus the parameter
/// store it reads from. Batch-norm statistics can only be updated through a
/// mutable store.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: Store<'a>,
    training: bool,
}

impl<'a> Ctx<'a> {
    pub fn train(store: &'a mut ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store: Store::Mut(store),
            training: true,
        }
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store: Store::Shared(store),
            training: false,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        match &self.store {
            Store::Mut(s) => s,
            Store::Shared(s) => s,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = match &self.store {
            Store::Mut(s) => &**s,
            Store::Shared(s) => *s,
        };
        self.graph.param(store, id)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        match &mut self.store {
            Store::Mut(s) => self.graph.backward(loss, s),
            Store::Shared(_) => Err(Error::contract("backward requires a training context")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        seed: u64,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = ps.add(
            &format!("{name}.weight"),
            &[out_c, in_c, kernel, kernel],
            InitKind::FanInUniform { fan_in },
            seed,
        )?;
        let bias = ps.add(&format!("{name}.bias"), &[out_c], InitKind::FanInUniform { fan_in }, seed)?;
        Ok(Self {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
            padding,
        })
    }

    /// 3×3 with padding 1 (spatial size preserved).
    pub fn same3(ps: &mut ParamStore, name: &str, in_c: usize, out_c: usize, seed: u64) -> Result<Self> {
        Self::new(ps, name, in_c, out_c, 3, 1, 1, seed)
    }

    pub fn pointwise(ps: &mut ParamStore, name: &str, in_c: usize, out_c: usize, seed: u64) -> Result<Self> {
        Self::new(ps, name, in_c, out_c, 1, 1, 0, seed)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Multiply-accumulates for one input of spatial size `h×w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (self.out_size(h) * self.out_size(w) * self.out_c * self.in_c * self.kernel * self.kernel) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running: BufferId,
    /// When set, the layer always normalises with running statistics.
    pub frozen: bool,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, seed: u64) -> Result<Self> {
        let gamma = ps.add(&format!("{name}.gamma"), &[channels], InitKind::Ones, seed)?;
        let beta = ps.add(&format!("{name}.beta"), &[channels], InitKind::Zeros, seed)?;
        let mut stats = Tensor::zeros(vec![2, channels]);
        stats.data_mut()[channels..].fill(1.0);
        let running = ps.add_buffer(&format!("{name}.running_stats"), stats)?;
        Ok(Self {
            gamma,
            beta,
            running,
            frozen: false,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.training && !self.frozen {
            if let Store::Mut(s) = &mut ctx.store {
                let running = s.buffer_mut(self.running);
                return ctx.graph.batch_norm(x, gamma, beta, running, true);
            }
        }
        let mut running = ctx.store().buffer(self.running).clone();
        ctx.graph.batch_norm(x, gamma, beta, &mut running, false)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    weight: ParamId,
    bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let init = InitKind::FanInUniform { fan_in: in_dim };
        let weight = ps.add(&format!("{name}.weight"), &[in_dim, out_dim], init, seed)?;
        let bias = ps.add(&format!("{name}.bias"), &[out_dim], init, seed)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.dense(x, w, b)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn macs(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }
}

/// Post-activation ordering of a convolution unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitOrder {
    /// conv → batch-norm → activation
    NormThenAct,
    /// conv → activation → batch-norm
    ActThenNorm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

/// Convolution followed by batch-norm and an activation.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv,
    pub norm: BatchNorm,
    pub act: Activation,
    pub order: UnitOrder,
}

impl ConvUnit {
    pub fn new(conv: Conv, ps: &mut ParamStore, name: &str, act: Activation, order: UnitOrder, seed: u64) -> Result<Self> {
        let norm = BatchNorm::new(ps, &format!("{name}.bn"), conv.out_c, seed)?;
        Ok(Self { conv, norm, act, order })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let act = |ctx: &mut Ctx, v: Var| match self.act {
            Activation::Relu => ctx.graph.relu(v),
            Activation::LeakyRelu(s) => ctx.graph.leaky_relu(v, s),
        };
        match self.order {
            UnitOrder::NormThenAct => {
                let n = self.norm.forward(ctx, y)?;
                Ok(act(ctx, n))
            }
            UnitOrder::ActThenNorm => {
                let a = act(ctx, y);
                self.norm.forward(ctx, a)
            }
        }
    }

    pub fn set_frozen_norm(&mut self, frozen: bool) {
        self.norm.frozen = frozen;
    }
}
