//! ADAM optimizer with bias correction, and the cosine-decay schedule
//! the trainer steps once per iteration.

use std::collections::HashMap;

use ndarray::Array5;

use crate::network::ParamStore;
use crate::tape::ParamRef;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// Optimizer state for one component's parameter store.
pub struct Adam<T: Scalar> {
    params: AdamParams,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, params: AdamParams) -> Self {
        let m = store.entries().iter().map(|e| Array5::zeros(e.value.dim())).collect();
        let v = store.entries().iter().map(|e| Array5::zeros(e.value.dim())).collect();
        Adam { params, m, v, t: 0 }
    }

    /// Apply one update from the gradient map; parameters without a
    /// gradient entry are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &HashMap<ParamRef, &Tensor<T>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = T::from_f64(self.params.beta1);
        let b2 = T::from_f64(self.params.beta2);
        let one = T::one();
        let eps = T::from_f64(self.params.eps);
        let corr1 = T::from_f64(1.0 - self.params.beta1.powi(self.t as i32));
        let corr2 = T::from_f64(1.0 - self.params.beta2.powi(self.t as i32));
        let lr_t = T::from_f64(lr);

        let store_id = store.id();
        for (idx, entry) in store.entries_mut().iter_mut().enumerate() {
            let key = ParamRef { store: store_id, index: idx };
            let Some(grad) = grads.get(&key) else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(grad, |mv, &g| *mv = b1 * *mv + (one - b1) * g);
            v.zip_mut_with(grad, |vv, &g| *vv = b2 * *vv + (one - b2) * g * g);
            ndarray::Zip::from(&mut entry.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let m_hat = mv / corr1;
                    let v_hat = vv / corr2;
                    *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Cosine decay from `lr_max` (t = 0) to `lr_min` (t = total).
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}
