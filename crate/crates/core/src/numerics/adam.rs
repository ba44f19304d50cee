use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};

/// Adam moments and hyperparameters.
///
/// Moment buffers are created lazily so that parameters added to the store
/// after construction (prototype embeddings) are picked up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moment(&self, idx: usize) -> Option<&Matrix> {
        self.first.get(idx)
    }

    pub fn second_moment(&self, idx: usize) -> Option<&Matrix> {
        self.second.get(idx)
    }

    /// Applies one Adam update to every non-frozen parameter, then zeroes all gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        store.ensure_grads();
        while self.first.len() < store.len() {
            let shape = store
                .get(super::ParamId(self.first.len()))
                .value
                .shape();
            self.first.push(Matrix::zeros(shape.0, shape.1));
            self.second.push(Matrix::zeros(shape.0, shape.1));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let param = store.get_mut(id);
            if param.frozen {
                continue;
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for (((w, g), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(param.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grad();
    }
}
