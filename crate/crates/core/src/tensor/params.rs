use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen parameters still receive gradients but the optimizer skips them.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum InitKind {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Names are unique across both.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<(String, Tensor)>,
    names: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

/// FNV-1a; stable across platforms and toolchains.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.names.insert(name.to_owned(), slot);
        Ok(())
    }

    /// Registers a parameter initialised from an RNG keyed by `(seed, name)`,
    /// so the values of one parameter never depend on which others exist.
    pub fn add(&mut self, name: &str, shape: &[usize], init: InitKind, seed: u64) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        let tensor = match init {
            InitKind::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
            }
            InitKind::Zeros => Tensor::zeros(shape.to_vec()),
            InitKind::Ones => Tensor::ones(shape.to_vec()),
        };
        self.add_tensor(name, tensor)
    }

    pub fn add_tensor(&mut self, name: &str, mut tensor: Tensor) -> Result<ParamId> {
        let id = self.params.len();
        self.claim(name, Slot::Param(id))?;
        tensor.requires_grad = true;
        tensor.grad = Some(vec![0.0; tensor.len()]);
        self.params.push(Parameter {
            name: name.to_owned(),
            tensor,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> Result<BufferId> {
        let id = self.buffers.len();
        self.claim(name, Slot::Buffer(id))?;
        self.buffers.push((name.to_owned(), tensor));
        Ok(BufferId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        self.params[id.0].tensor.grad.as_deref().expect("parameters always carry a grad")
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let dst = self.params[id.0].tensor.grad.as_mut().expect("parameter grad");
        for (d, s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Parameters then buffers, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let strip = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid");
        self.params
            .iter()
            .map(|p| (p.name.clone(), strip(&p.tensor)))
            .chain(self.buffers.iter().map(|(n, t)| (n.clone(), strip(t))))
            .collect()
    }

    /// Overwrites values by name. Every stored name must be present with the
    /// same shape; extra entries are an error too.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.params.len() + self.buffers.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                self.params.len() + self.buffers.len()
            )));
        }
        for (name, t) in entries {
            let slot = *self
                .names
                .get(name)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{name}` in checkpoint")))?;
            let dst = match slot {
                Slot::Param(i) => &mut self.params[i].tensor,
                Slot::Buffer(i) => &mut self.buffers[i].1,
            };
            if dst.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Copies values for every name present in both stores (used to plug a
    /// pretrained extractor into a full model).
    pub fn copy_matching_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut copied = 0;
        for (name, t) in other.named_tensors() {
            if !name.starts_with(prefix) {
                continue;
            }
            let Some(slot) = self.names.get(&name).copied() else {
                continue;
            };
            let dst = match slot {
                Slot::Param(i) => &mut self.params[i].tensor,
                Slot::Buffer(i) => &mut self.buffers[i].1,
            };
            if dst.shape() == t.shape() {
                dst.data_mut().copy_from_slice(t.data());
                copied += 1;
            }
        }
        copied
    }
}
