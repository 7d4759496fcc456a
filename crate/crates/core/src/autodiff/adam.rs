use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed group of parameters.
///
/// Parameters in the group that are absent from a [`Gradients`] are stepped
/// with a zero gradient, so their moments keep decaying.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    params: Vec<ParamId>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[ParamId], store: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", config.lr)));
        }
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape());
        Ok(Adam {
            config,
            step: 0,
            params: params.to_vec(),
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for &id in &self.params {
            if let Some(g) = grads.param(id) {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        name: store.name(id).to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (slot, &id) in self.params.iter().enumerate() {
            let grad = grads.param(id).map(Tensor::data);
            let m = self.first[slot].data_mut();
            let v = self.second[slot].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
