use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// RMSprop with one squared-gradient average per parameter element.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    state: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        Self { config, state: Vec::new() }
    }

    /// Squared-gradient averages, indexed like `ParamStore::params`.
    pub fn state(&self) -> &[Vec<f64>] {
        &self.state
    }

    /// `v ← ρv + (1−ρ)g²; p ← p − lr·g/(√v + eps)` for every trainable
    /// parameter. Any non-finite gradient aborts before anything is changed.
    pub fn step(&mut self, ps: &mut ParamStore) -> Result<()> {
        for p in ps.params() {
            let g = p.tensor.grad.as_deref().unwrap_or(&[]);
            let bad = g.iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFiniteGradient {
                    param: p.name.clone(),
                    count: bad,
                    len: g.len(),
                });
            }
        }
        if self.state.len() != ps.len() {
            self.state = ps.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        }
        let RmsPropConfig { lr, rho, eps } = self.config;
        for (p, v) in ps.params_mut().iter_mut().zip(&mut self.state) {
            if !p.trainable {
                continue;
            }
            let grad = p.tensor.grad.take().expect("parameter grad");
            for ((x, &g), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                *v = rho * *v + (1.0 - rho) * g * g;
                if g != 0.0 {
                    *x -= lr * g / (v.sqrt() + eps);
                }
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}
