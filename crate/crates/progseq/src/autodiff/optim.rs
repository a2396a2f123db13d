//! Adam optimizer over a [`ParamStore`].

use crate::scalar::Scalar;

use super::tensor::ParamStore;
use super::AutodiffError;

/// Adam with bias correction. Moment buffers follow the store's
/// parameter order and shapes.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    step: u64,
    learning_rate: S,
    beta1: S,
    beta2: S,
    epsilon: S,
}

impl<S: Scalar> AdamState<S> {
    /// Default betas 0.9 / 0.999, epsilon 1e-8.
    pub fn new(store: &ParamStore<S>, learning_rate: S) -> Self {
        let first = store
            .iter()
            .map(|(_, _, t)| vec![S::zero(); t.numel()])
            .collect();
        let second = store
            .iter()
            .map(|(_, _, t)| vec![S::zero(); t.numel()])
            .collect();
        AdamState {
            first,
            second,
            step: 0,
            learning_rate,
            beta1: S::of_f64(0.9),
            beta2: S::of_f64(0.999),
            epsilon: S::of_f64(1e-8),
        }
    }

    pub fn learning_rate(&self) -> S {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: S) {
        self.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update in place. Parameters whose gradient
    /// was never populated are treated as zero-gradient (moments decay
    /// only). A non-finite gradient aborts with the parameter name.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<(), AutodiffError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let one = S::one();
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(grad) = &store.get(id).grad {
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(AutodiffError::NonFiniteGrad {
                        name: store.name(id).to_string(),
                    });
                }
            }
            let tensor = store.get_mut(id);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let (values, grad) = tensor.values_mut_with_grad();
            match grad {
                Some(grad) => {
                    for i in 0..values.len() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (one - b1) * g;
                        v[i] = b2 * v[i] + (one - b2) * g * g;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        values[i] = values[i] - lr * mh / (vh.sqrt() + eps);
                    }
                }
                None => {
                    for i in 0..values.len() {
                        m[i] = b1 * m[i];
                        v[i] = b2 * v[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        values[i] = values[i] - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
