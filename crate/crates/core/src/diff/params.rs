use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which part of the model a tensor belongs to.
///
/// The trainer routes each loss's gradient to a fixed set of groups, so every
/// tensor is tagged at creation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Experts,
    TaskEncoder,
    Lstm,
    Attention,
    Actor,
    Critic,
    TargetCritic,
    Temperature,
    /// Tensors owned by tests and standalone tools.
    Free,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Experts,
        ParamGroup::TaskEncoder,
        ParamGroup::Lstm,
        ParamGroup::Attention,
        ParamGroup::Actor,
        ParamGroup::Critic,
        ParamGroup::TargetCritic,
        ParamGroup::Temperature,
        ParamGroup::Free,
    ];
}

/// A learnable tensor with its accumulated gradient.
///
/// Every tensor is stored as a matrix; biases are `1 x n`. `values` and
/// `grad` always share a shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub group: ParamGroup,
    pub values: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, group: ParamGroup, values: Matrix) -> Self {
        let grad = Matrix::zeros(values.raw_dim());
        Self {
            name: name.into(),
            group,
            values,
            grad,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.values.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite()) && self.grad.iter().all(|v| v.is_finite())
    }
}

/// Flat registry of every tensor in a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, tensor: ParamTensor) -> ParamId {
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        self.add(ParamTensor::new(name, group, Matrix::zeros((rows, cols))))
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let values = Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound));
        self.add(ParamTensor::new(name, group, values))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn values(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0].values
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).group == group).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients of tensors whose group
    /// passes `accept`. Returns how many tensors were touched.
    pub fn accumulate(&mut self, grads: &ParamGrads, scale: f64, accept: impl Fn(ParamGroup) -> bool) -> usize {
        let mut touched = 0;
        for (id, g) in grads.iter() {
            let t = &mut self.tensors[id.0];
            if !accept(t.group) {
                continue;
            }
            t.grad.scaled_add(scale, g);
            touched += 1;
        }
        touched
    }

    /// Copies values of `src` into `dst` (shapes must agree).
    pub fn copy_values(&mut self, src: ParamId, dst: ParamId) {
        let v = self.tensors[src.0].values.clone();
        self.tensors[dst.0].values.assign(&v);
    }

    /// `dst <- (1 - tau) * dst + tau * src`
    pub fn polyak(&mut self, src: ParamId, dst: ParamId, tau: f64) {
        let (a, b) = if src.0 < dst.0 {
            let (lo, hi) = self.tensors.split_at_mut(dst.0);
            (&lo[src.0], &mut hi[0])
        } else {
            let (lo, hi) = self.tensors.split_at_mut(src.0);
            (&hi[0], &mut lo[dst.0])
        };
        b.values.zip_mut_with(&a.values, |d, &s| *d = (1.0 - tau) * *d + tau * s);
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if !t.is_finite() {
                return Err(Error::numeric(format!("non-finite entry in tensor `{}`", t.name)));
            }
        }
        Ok(())
    }

    /// Structural equality check used when loading checkpoints.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.values.dim() == b.values.dim())
    }
}

/// Gradients for parameter leaves produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Matrix) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
