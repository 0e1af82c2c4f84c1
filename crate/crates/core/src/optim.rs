//! Adam with decoupled weight decay.

use ddatr_tensor::{ParamStore, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First and second moments per parameter name.
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update of every trainable parameter from its accumulated gradient,
    /// scaled by `grad_scale`. Parameters without a gradient only decay.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if self.moments.len() <= k {
                let n = p.value.numel();
                self.moments.push((p.name.clone(), vec![0.0; n], vec![0.0; n]));
            }
            let (name, m, v) = &mut self.moments[k];
            debug_assert_eq!(name, &p.name);
            let grad = p.grad.as_ref().map(|g| g.data().to_vec());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].as_f64() * grad_scale);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                let wv = w.as_f64();
                *w = T::cast(wv - self.lr * (update + self.weight_decay * wv));
            }
        }
    }
}
