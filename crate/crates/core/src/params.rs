//! Learnable parameters and the store that owns them across forward passes.

use crate::tensor::{DenseTensor, Real};

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: DenseTensor<T>,
    pub grad: DenseTensor<T>,
}

/// Owns every parameter of a model; tapes copy values in at forward time
/// and accumulate gradients back at backward time.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: DenseTensor<T>) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = DenseTensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &DenseTensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseTensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &DenseTensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut DenseTensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn values_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }
}
