use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{outer, shape_err, NetError, Parameters};

/// Value network: a learned query attends over the observation token and a
/// linear head reads out the expected return.
///
/// With a single token the attention weight is a sigmoid gate
/// `g = sigmoid((u + W_q^T x) . (W_k^T x) / sqrt(h))` applied to the value
/// projection `W_v^T x`; the output is `w_o . (g * W_v^T x) + b_o`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub query: Array1<f64>,
    pub w_o: Array1<f64>,
    pub b_o: f64,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for ValueParams {
    fn eq(&self, other: &Self) -> bool {
        self.w_q == other.w_q
            && self.w_k == other.w_k
            && self.w_v == other.w_v
            && self.query == other.query
            && self.w_o == other.w_o
            && self.b_o == other.b_o
    }
}

impl ValueParams {
    pub fn init(d: usize, h: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = || Array2::from_shape_fn((d, h), |_| rng.gen_range(-bound..bound));
        let (w_q, w_k, w_v) = (draw(), draw(), draw());
        let out_bound = 1.0 / (h as f64).sqrt();
        let w_o = Array1::from_shape_fn(h, |_| rng.gen_range(-out_bound..out_bound));
        ValueParams {
            w_q,
            w_k,
            w_v,
            query: Array1::zeros(h),
            w_o,
            b_o: 0.0,
            version: 0,
        }
    }

    pub fn zeros(d: usize, h: usize) -> Self {
        ValueParams {
            w_q: Array2::zeros((d, h)),
            w_k: Array2::zeros((d, h)),
            w_v: Array2::zeros((d, h)),
            query: Array1::zeros(h),
            w_o: Array1::zeros(h),
            b_o: 0.0,
            version: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let (d, h) = self.w_q.dim();
        for (name, m) in [("value.w_k", &self.w_k), ("value.w_v", &self.w_v)] {
            if m.dim() != (d, h) {
                return Err(shape_err(
                    name,
                    format!("{d}x{h}"),
                    format!("{:?}", m.dim()),
                ));
            }
        }
        for (name, v) in [("value.query", &self.query), ("value.w_o", &self.w_o)] {
            if v.len() != h {
                return Err(shape_err(name, h, v.len()));
            }
        }
        if !self.all_finite() {
            return Err(NetError::NonFinite {
                what: "value parameters".into(),
                diagnostics: "checkpoint holds NaN or infinite weights".into(),
            });
        }
        Ok(())
    }
}

impl Parameters for ValueParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w_q.as_slice().expect("standard layout"),
            self.w_k.as_slice().expect("standard layout"),
            self.w_v.as_slice().expect("standard layout"),
            self.query.as_slice().expect("standard layout"),
            self.w_o.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.b_o),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_q.as_slice_mut().expect("standard layout"),
            self.w_k.as_slice_mut().expect("standard layout"),
            self.w_v.as_slice_mut().expect("standard layout"),
            self.query.as_slice_mut().expect("standard layout"),
            self.w_o.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.b_o),
        ]
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn bump_version(&mut self) {
        self.version += 1;
    }
}

#[derive(Debug, Clone)]
pub struct ValueCache {
    version: u64,
    obs: Array1<f64>,
    q: Array1<f64>,
    k: Array1<f64>,
    v: Array1<f64>,
    gate: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn value_forward(params: &ValueParams, obs: &[f64]) -> Result<(f64, ValueCache), NetError> {
    let (d, h) = params.w_q.dim();
    if obs.len() != d {
        return Err(shape_err("observation embedding", d, obs.len()));
    }
    let x = ArrayView1::from(obs);
    let q = x.dot(&params.w_q) + &params.query;
    let k = x.dot(&params.w_k);
    let v = x.dot(&params.w_v);
    let gate = sigmoid(q.dot(&k) / (h as f64).sqrt());
    let out = gate * params.w_o.dot(&v) + params.b_o;
    let cache = ValueCache {
        version: params.version,
        obs: x.to_owned(),
        q,
        k,
        v,
        gate,
    };
    Ok((out, cache))
}

/// Gradients of `upstream * value(obs)`.
pub fn value_backward(
    params: &ValueParams,
    cache: &ValueCache,
    upstream: f64,
) -> Result<ValueParams, NetError> {
    if cache.version != params.version {
        return Err(NetError::StaleCache {
            cache: cache.version,
            params: params.version,
        });
    }
    let (d, h) = params.w_q.dim();
    if cache.obs.len() != d || cache.q.len() != h {
        return Err(NetError::Usage(
            "cache does not match these parameters".into(),
        ));
    }
    let g = cache.gate;
    let scale = 1.0 / (h as f64).sqrt();
    // out = w_o . (g v) + b_o
    let g_wo = &cache.v * (upstream * g);
    let d_hidden = &params.w_o * upstream;
    let d_gate = d_hidden.dot(&cache.v);
    let d_v = &d_hidden * g;
    let d_score = d_gate * g * (1.0 - g);
    let d_q = &cache.k * (d_score * scale);
    let d_k = &cache.q * (d_score * scale);

    Ok(ValueParams {
        w_q: outer(&cache.obs, &d_q),
        w_k: outer(&cache.obs, &d_k),
        w_v: outer(&cache.obs, &d_v),
        query: d_q,
        w_o: g_wo,
        b_o: upstream,
        version: params.version,
    })
}
