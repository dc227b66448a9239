use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{PopError, Result};

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, e)| Tensor::zeros(e.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let eps = self.eps as f32;
        let wd = self.weight_decay as f32;
        for (i, (_, e)) in store.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, g), mi), vi) in e.value.data_mut().iter_mut().zip(e.grad.data()).zip(m).zip(v) {
                let g = *g + wd * *p;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *p -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Moment tensors keyed `adam.m.<param>` / `adam.v.<param>`.
    pub fn state(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (_, e)) in store.iter().enumerate() {
            if e.trainable {
                out.insert(format!("adam.m.{}", e.name), self.m[i].clone());
                out.insert(format!("adam.v.{}", e.name), self.v[i].clone());
            }
        }
        out
    }

    pub fn restore(&mut self, store: &ParamStore, step: u64, state: &mut BTreeMap<String, Tensor>) -> Result<()> {
        for (i, (_, e)) in store.iter().enumerate() {
            if !e.trainable {
                continue;
            }
            for (key, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let name = format!("adam.{key}.{}", e.name);
                let t = state
                    .remove(&name)
                    .ok_or_else(|| PopError::Checkpoint(format!("missing optimizer tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(PopError::Checkpoint(format!("optimizer tensor {name} has wrong shape")));
                }
                *slot = t;
            }
        }
        self.step = step;
        Ok(())
    }
}
