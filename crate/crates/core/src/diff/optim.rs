use serde::{Deserialize, Serialize};

use super::params::{Matrix, ParamGrads, ParamGroup, ParamId, ParamStore};

/// Adam with bias correction. Moment buffers are kept per tensor; each group
/// may carry its own learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let first = store.iter().map(|(_, t)| Matrix::zeros(t.values.raw_dim())).collect::<Vec<_>>();
        let second = first.clone();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            first,
            second,
            steps: vec![0; store.len()],
        }
    }

    /// Applies one update to every tensor whose group has a learning rate,
    /// using the gradients stored in `store`, then clears those gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> Option<f64>) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let tensor = store.get_mut(id);
            let Some(rate) = lr(tensor.group) else { continue };
            let grad = std::mem::replace(&mut tensor.grad, Matrix::zeros(tensor.values.raw_dim()));
            self.update(store, id, &grad, rate);
        }
    }

    /// Updates only the tensors present in `grads`; tensors that received no
    /// gradient keep their values and moment state untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: impl Fn(ParamGroup) -> Option<f64>) {
        for (id, g) in grads.iter() {
            if let Some(rate) = lr(store.get(id).group) {
                self.update(store, id, g, rate);
            }
        }
    }

    fn update(&mut self, store: &mut ParamStore, id: ParamId, grad: &Matrix, rate: f64) {
        let i = id.0;
        self.steps[i] += 1;
        let t = self.steps[i] as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        ndarray::Zip::from(store.values_mut(id))
            .and(grad)
            .and(&mut self.first[i])
            .and(&mut self.second[i])
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= rate * mh / (vh.sqrt() + eps);
            });
    }

    pub fn same_layout(&self, store: &ParamStore) -> bool {
        self.first.len() == store.len() && store.iter().all(|(id, t)| self.first[id.0].dim() == t.values.dim())
    }
}
