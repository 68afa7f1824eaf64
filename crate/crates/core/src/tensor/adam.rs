use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are aligned with the parameter store
/// the state was created for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| {
                Tensor::new(p.tensor.shape().to_vec(), vec![0.0; p.tensor.len()]).expect("shape")
            })
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        for id in store.ids() {
            let g = grads.get(id);
            if g.shape() != store.tensor(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.tensor(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids() {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let theta = store.tensor_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                theta[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
