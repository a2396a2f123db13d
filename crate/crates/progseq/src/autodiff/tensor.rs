//! Dense tensors and the named parameter store.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::scalar::Scalar;

use super::AutodiffError;

/// Dense numeric array. Values are shared cheaply with computation
/// graphs via `Arc`; gradients are owned and populated by
/// [`Graph::scatter_grads`](super::Graph::scatter_grads) or directly by
/// callers.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    values: Arc<Vec<S>>,
    /// Accumulated gradient, same shape as `values` once populated.
    /// Never cleared implicitly; the training loop zeroes it.
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Self {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "value count {} does not match shape {:?}",
            values.len(),
            shape
        );
        Tensor {
            shape,
            values: Arc::new(values),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![S::zero(); n])
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![1, 1], vec![v])
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| S::of_f64(v)).collect())
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// Shared handle to the value buffer (no copy).
    pub(crate) fn values_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.values)
    }

    /// Mutable access to values. Clones the buffer only if a graph
    /// still holds a reference to it.
    pub fn values_mut(&mut self) -> &mut Vec<S> {
        Arc::make_mut(&mut self.values)
    }

    /// Simultaneous mutable values and read-only gradient access.
    pub fn values_mut_with_grad(&mut self) -> (&mut Vec<S>, Option<&Vec<S>>) {
        (Arc::make_mut(&mut self.values), self.grad.as_ref())
    }

    /// Adds `delta` into the gradient buffer, allocating zeros first if
    /// the gradient is unset.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        let g = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.values.len()]);
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Glorot-uniform initialised tensor: values drawn uniformly in
/// `±sqrt(6 / (fan_in + fan_out))`, reproducible from the seed.
///
/// Fan conventions: 2-D `(r, c)` weights applied as `x · W` use
/// `fan_in = r`, `fan_out = c`; 1-D uses the length for both; 3-D
/// convolution kernels `(c_out, c_in, k)` use `fan_in = c_in * k`,
/// `fan_out = c_out * k`.
pub fn xavier_init<S: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<S>, AutodiffError> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(AutodiffError::InvalidShape {
            shape: shape.to_vec(),
        });
    }
    let (fan_in, fan_out) = match shape.len() {
        1 => (shape[0], shape[0]),
        2 => (shape[0], shape[1]),
        3 => (shape[1] * shape[2], shape[0] * shape[2]),
        _ => {
            return Err(AutodiffError::InvalidShape {
                shape: shape.to_vec(),
            })
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| S::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Ok(Tensor::new(shape.to_vec(), values))
}

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store's parameter order.
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors. The order is the
/// checkpoint and optimizer-state order, so construction must be
/// deterministic. Each store carries a unique id so gradients
/// scattered from a graph land only in the store whose parameters
/// were bound (clones keep the id: they share the layout).
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        static NEXT_UID: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);
        ParamStore {
            uid: NEXT_UID.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        tensor.requires_grad = true;
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}
