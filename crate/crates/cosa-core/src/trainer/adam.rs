//! First-order adaptive-moment optimizer (step 1e-3, moment decays
//! 0.9/0.999, eps 1e-8 by default).

use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::collections::HashMap;

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step counter per parameter (bias correction).
    steps: HashMap<(String, String), u64>,
    first_moment: HashMap<(String, String), Tensor<f32>>,
    second_moment: HashMap<(String, String), Tensor<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: HashMap::new(),
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    /// Apply one update to every parameter of the given stores from the
    /// gradients accumulated in them.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<f32>], lr: f64) {
        for store in stores.iter_mut() {
            let store_name = store.name().to_string();
            store.for_each_mut(|pname, value, grad| {
                let key = (store_name.clone(), pname.to_string());
                let t = self.steps.entry(key.clone()).or_insert(0);
                *t += 1;
                let tstep = *t as i32;
                let m = self
                    .first_moment
                    .entry(key.clone())
                    .or_insert_with(|| Tensor::zeros(value.shape()));
                let v = self
                    .second_moment
                    .entry(key)
                    .or_insert_with(|| Tensor::zeros(value.shape()));
                let b1 = self.beta1 as f32;
                let b2 = self.beta2 as f32;
                let bias1 = 1.0 - (self.beta1 as f32).powi(tstep);
                let bias2 = 1.0 - (self.beta2 as f32).powi(tstep);
                for ((p, &g), (mi, vi)) in value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                {
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    let m_hat = *mi / bias1;
                    let v_hat = *vi / bias2;
                    *p -= (lr as f32) * m_hat / (v_hat.sqrt() + self.eps as f32);
                }
            });
        }
    }

    /// Moment tensors for checkpointing, keyed `store/param`.
    pub fn state_entries(&self) -> Vec<(String, &Tensor<f32>, &Tensor<f32>, u64)> {
        let mut keys: Vec<_> = self.steps.keys().cloned().collect();
        keys.sort();
        keys.into_iter()
            .map(|key| {
                let name = format!("{}/{}", key.0, key.1);
                let step = self.steps[&key];
                (name, &self.first_moment[&key], &self.second_moment[&key], step)
            })
            .collect()
    }

    pub fn restore_entry(&mut self, store: &str, param: &str, m: Tensor<f32>, v: Tensor<f32>, step: u64) {
        let key = (store.to_string(), param.to_string());
        self.steps.insert(key.clone(), step);
        self.first_moment.insert(key.clone(), m);
        self.second_moment.insert(key, v);
    }
}
