use serde::{Deserialize, Serialize};

use super::{NetError, Parameters};

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradients (1 when not clipped).
    pub clip_scale: f64,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect()
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Checks that the moment buffers fit `params`.
    pub fn matches<P: Parameters>(&self, params: &P) -> bool {
        let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        self.m.iter().map(Vec::len).eq(lens.iter().copied())
            && self.v.iter().map(Vec::len).eq(lens.iter().copied())
    }

    /// Clips `grads` to `clip_norm` by global norm, then applies one Adam
    /// update with learning rate `lr`. Non-finite gradients abort the step
    /// without touching parameters or moments.
    pub fn step<P: Parameters>(
        &mut self,
        params: &mut P,
        grads: &P,
        lr: f64,
        clip_norm: f64,
    ) -> Result<StepStats, NetError> {
        if !self.matches(params) || !self.matches(grads) {
            return Err(NetError::Usage(
                "optimizer state does not match parameters".into(),
            ));
        }
        if !grads.all_finite() {
            let bad: Vec<String> = grads
                .tensors()
                .iter()
                .enumerate()
                .filter_map(|(i, t)| {
                    let n = t.iter().filter(|v| !v.is_finite()).count();
                    (n > 0).then(|| format!("tensor {i}: {n} non-finite of {}", t.len()))
                })
                .collect();
            return Err(NetError::NonFinite {
                what: "gradients".into(),
                diagnostics: bad.join("; "),
            });
        }
        let grad_norm = grads.global_norm();
        let clip_scale = if clip_norm > 0.0 && grad_norm > clip_norm {
            clip_norm / grad_norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i] * clip_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        params.bump_version();
        Ok(StepStats {
            grad_norm,
            clip_scale,
        })
    }
}
