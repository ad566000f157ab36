use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{outer, shape_err, standard, NetError, Parameters};

/// Query/key projections of the policy attention layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.w_q == other.w_q
            && self.b_q == other.b_q
            && self.w_k == other.w_k
            && self.b_k == other.b_k
    }
}

impl PolicyParams {
    /// Projections drawn from U(-1/sqrt(d), 1/sqrt(d)), zero biases.
    pub fn init(d: usize, h: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = || Array2::from_shape_fn((d, h), |_| rng.gen_range(-bound..bound));
        let w_q = draw();
        let w_k = draw();
        PolicyParams {
            w_q,
            b_q: Array1::zeros(h),
            w_k,
            b_k: Array1::zeros(h),
            version: 0,
        }
    }

    pub fn zeros(d: usize, h: usize) -> Self {
        PolicyParams {
            w_q: Array2::zeros((d, h)),
            b_q: Array1::zeros(h),
            w_k: Array2::zeros((d, h)),
            b_k: Array1::zeros(h),
            version: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_q.ncols()
    }

    /// Checks internal shape consistency (used after deserialization).
    pub fn validate(&self) -> Result<(), NetError> {
        let (d, h) = self.w_q.dim();
        if self.w_k.dim() != (d, h) {
            return Err(shape_err(
                "policy.w_k",
                format!("{d}x{h}"),
                format!("{:?}", self.w_k.dim()),
            ));
        }
        if self.b_q.len() != h {
            return Err(shape_err("policy.b_q", h, self.b_q.len()));
        }
        if self.b_k.len() != h {
            return Err(shape_err("policy.b_k", h, self.b_k.len()));
        }
        if !self.all_finite() {
            return Err(NetError::NonFinite {
                what: "policy parameters".into(),
                diagnostics: "checkpoint holds NaN or infinite weights".into(),
            });
        }
        Ok(())
    }
}

impl Parameters for PolicyParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w_q.as_slice().expect("standard layout"),
            self.b_q.as_slice().expect("standard layout"),
            self.w_k.as_slice().expect("standard layout"),
            self.b_k.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_q.as_slice_mut().expect("standard layout"),
            self.b_q.as_slice_mut().expect("standard layout"),
            self.w_k.as_slice_mut().expect("standard layout"),
            self.b_k.as_slice_mut().expect("standard layout"),
        ]
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn bump_version(&mut self) {
        self.version += 1;
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PolicyCache {
    version: u64,
    obs: Array1<f64>,
    actions: Array2<f64>,
    query: Array1<f64>,
    keys: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

/// Numerically stable softmax; also returns log-probabilities.
pub fn softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let log_probs: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let probs = log_probs.iter().map(|l| l.exp()).collect();
    (probs, log_probs)
}

pub fn entropy(probs: &[f64], log_probs: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(log_probs)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum::<f64>()
}

/// Gradient of `upstream * log p[chosen]` with respect to the logits.
pub fn log_prob_logit_grad(probs: &[f64], chosen: usize, upstream: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(j, p)| upstream * (f64::from(u8::from(j == chosen)) - p))
        .collect()
}

/// Gradient of `upstream * H(p)` with respect to the logits.
pub fn entropy_logit_grad(probs: &[f64], log_probs: &[f64], upstream: f64) -> Vec<f64> {
    let h = entropy(probs, log_probs);
    probs
        .iter()
        .zip(log_probs)
        .map(|(p, l)| {
            if *p > 0.0 {
                -upstream * p * (l + h)
            } else {
                0.0
            }
        })
        .collect()
}

/// Scores `actions` (one embedding per row) against `obs`.
pub fn policy_forward(
    params: &PolicyParams,
    obs: &[f64],
    actions: &[Vec<f64>],
) -> Result<(PolicyOutput, PolicyCache), NetError> {
    let (d, h) = params.w_q.dim();
    if obs.len() != d {
        return Err(shape_err("observation embedding", d, obs.len()));
    }
    if actions.is_empty() {
        return Err(shape_err("action embeddings", "at least one row", 0));
    }
    if let Some((i, a)) = actions.iter().enumerate().find(|(_, a)| a.len() != d) {
        return Err(shape_err(&format!("action embedding {i}"), d, a.len()));
    }
    let n = actions.len();
    let x = ArrayView1::from(obs);
    let a = Array2::from_shape_fn((n, d), |(i, j)| actions[i][j]);
    let query = x.dot(&params.w_q) + &params.b_q;
    let keys = a.dot(&params.w_k) + &params.b_k;
    let scale = 1.0 / (h as f64).sqrt();
    let logits: Vec<f64> = keys.dot(&query).iter().map(|z| z * scale).collect();
    let (probs, log_probs) = softmax(&logits);
    let cache = PolicyCache {
        version: params.version,
        obs: x.to_owned(),
        actions: a,
        query,
        keys,
    };
    Ok((
        PolicyOutput {
            logits,
            probs,
            log_probs,
        },
        cache,
    ))
}

/// Backpropagates a gradient on the logits into parameter gradients.
pub fn policy_backward(
    params: &PolicyParams,
    cache: &PolicyCache,
    d_logits: &[f64],
) -> Result<PolicyParams, NetError> {
    if cache.version != params.version {
        return Err(NetError::StaleCache {
            cache: cache.version,
            params: params.version,
        });
    }
    let (d, h) = params.w_q.dim();
    let n = cache.actions.nrows();
    if cache.obs.len() != d || cache.actions.ncols() != d || cache.query.len() != h {
        return Err(NetError::Usage(
            "cache does not match these parameters".into(),
        ));
    }
    if d_logits.len() != n {
        return Err(shape_err("logit gradient", n, d_logits.len()));
    }
    let scale = 1.0 / (h as f64).sqrt();
    let dz = Array1::from_iter(d_logits.iter().map(|g| g * scale));
    // logits = keys . query * scale
    let d_query = cache.keys.t().dot(&dz);
    let d_keys = Array2::from_shape_fn((n, h), |(i, j)| dz[i] * cache.query[j]);

    let g_wq = outer(&cache.obs, &d_query);
    let g_wk = standard(cache.actions.t().dot(&d_keys));
    let g_bk = d_keys.sum_axis(ndarray::Axis(0));
    Ok(PolicyParams {
        w_q: g_wq,
        b_q: d_query,
        w_k: g_wk,
        b_k: g_bk,
        version: params.version,
    })
}
