use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Tensor};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moments are kept per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.tensors.len() != store.len() {
            return shape_err("adam", &[store.len()], &[grads.tensors.len()]);
        }
        for (id, g) in store.ids().zip(&grads.tensors) {
            if g.shape != store.get(id).shape {
                return shape_err("adam", &store.get(id).shape, &g.shape);
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads.tensors[k].data;
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            let p = &mut store.get_mut(id).data;
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
