//! Adam optimizer with bias correction.

use crate::params::ParamStore;
use crate::tensor::{DenseTensor, Real};

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    m: Vec<DenseTensor<T>>,
    v: Vec<DenseTensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store
            .iter()
            .map(|p| DenseTensor::zeros(p.value.shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected update over every parameter in the store using the
/// gradients currently accumulated there.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
) {
    state.step += 1;
    let bc1 = T::one() - beta1.powi(state.step as i32);
    let bc2 = T::one() - beta2.powi(state.step as i32);
    for (i, p) in store.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let values = p.value.data_mut();
        let grads = p.grad.data();
        for j in 0..values.len() {
            let g = grads[j];
            m[j] = beta1 * m[j] + (T::one() - beta1) * g;
            v[j] = beta2 * v[j] + (T::one() - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            values[j] = values[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.register("w", DenseTensor::scalar(value));
        store.grad_mut(id).data_mut()[0] = grad;
        store
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = store_with(1.0, 1.0);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, 1e-3, 0.9, 0.95, 1e-8);
        let v = store.iter().next().unwrap().value.scalar_value();
        assert!((v - (1.0 - 1e-3)).abs() < 1e-8, "{v}");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_means_zero_delta() {
        let mut store = store_with(0.7, 0.0);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, 1e-3, 0.9, 0.95, 1e-8);
        assert_eq!(store.iter().next().unwrap().value.scalar_value(), 0.7);
    }

    #[test]
    fn identical_gradient_sequences_give_identical_parameters() {
        let run = |grads: &[f64]| {
            let mut store = store_with(0.25, 0.0);
            let mut state = AdamState::new(&store);
            for &g in grads {
                let id = crate::params::ParamId(0);
                store.grad_mut(id).data_mut()[0] = g;
                adam_step(&mut store, &mut state, 3e-4, 0.9, 0.95, 1e-8);
            }
            let bits = store.iter().next().unwrap().value.scalar_value().to_bits();
            bits
        };
        let grads = [0.5, -0.25, 1.5, 0.0, -0.125];
        assert_eq!(run(&grads), run(&grads));
    }

    #[test]
    fn infinite_gradient_poisons_parameters() {
        let mut store = store_with(1.0, f64::INFINITY);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, 1e-3, 0.9, 0.95, 1e-8);
        assert!(!store.values_finite());
    }
}
