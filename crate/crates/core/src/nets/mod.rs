//! Policy and value networks of the planning agent, with hand-written
//! backward passes and an Adam optimizer.
//!
//! Both networks read frozen text embeddings. The policy scores each
//! candidate action by single-head scaled dot-product attention between the
//! projected observation (query) and the projected action (key); the value
//! network gates a projection of the observation with a sigmoid attention
//! score and reads it out linearly.

mod optim;
mod policy;
mod value;

use ndarray::{Array1, Array2};
use thiserror::Error;

pub use optim::{Adam, StepStats};
pub use policy::{
    entropy, entropy_logit_grad, log_prob_logit_grad, policy_backward, policy_forward, softmax,
    PolicyCache, PolicyOutput, PolicyParams,
};
pub use value::{value_backward, value_forward, ValueCache, ValueParams};

/// Hidden size of both attention layers.
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch for {tensor}: expected {expected}, got {got}")]
    Shape {
        tensor: String,
        expected: String,
        got: String,
    },

    #[error("cache was produced by a different parameter version ({cache} vs {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("non-finite values in {what}: {diagnostics}")]
    NonFinite { what: String, diagnostics: String },

    #[error("invalid usage: {0}")]
    Usage(String),
}

pub(crate) fn shape_err(tensor: &str, expected: impl ToString, got: impl ToString) -> NetError {
    NetError::Shape {
        tensor: tensor.to_string(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// `a b^T` in standard (row-major) layout.
pub(crate) fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Parameter tensors are exposed as flat slices, which requires row-major
/// storage; matrix products over transposed views may not return it.
pub(crate) fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// A fixed set of named tensors that can be visited as flat slices.
/// Gradients use the same type as the parameters they belong to.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    /// Monotone counter bumped on every in-place update.
    fn version(&self) -> u64;
    fn bump_version(&mut self);

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrites every entry from a flat vector in [`Parameters::flatten`]
    /// order.
    fn assign_flat(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.num_params() {
            return Err(shape_err("flat parameters", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        self.bump_version();
        Ok(())
    }
}
