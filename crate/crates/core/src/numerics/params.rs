use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Matrix;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A learnable matrix with its gradient accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    #[serde(skip_serializing, default = "empty_grad")]
    pub grad: Matrix,
    /// Frozen parameters still receive gradients but the optimizer leaves them untouched.
    pub frozen: bool,
}

fn empty_grad() -> Matrix {
    Matrix::zeros(0, 0)
}

/// Owns every learnable matrix of a model.
///
/// Gradients accumulate across backward passes until [`ParamStore::zero_grad`]
/// (or an optimizer step) clears them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialized parameter.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit));
        self.add(name, value)
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = Matrix::from_fn(rows, cols, |_, _| normal.sample(rng));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Matrix) {
        let p = &mut self.params[id.0];
        if p.grad.shape() != p.value.shape() {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
        p.grad.add_assign(grad);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.grad.shape() != p.value.shape() {
                p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
            } else {
                p.grad.fill(0.0);
            }
        }
    }

    /// Restores gradient buffers after deserialization.
    pub fn ensure_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.shape() != p.value.shape() {
                p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}
