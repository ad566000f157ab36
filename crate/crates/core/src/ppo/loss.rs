use crate::error::{Error, Result};

/// Clipped surrogate objective for one sample and its derivative with
/// respect to the new log-probability.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        // d(r A)/d(log p_new) = r A
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// Batch PPO policy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    /// Negated mean clipped objective minus the entropy bonus.
    pub loss: f64,
    /// Mean clipped objective, without the entropy term.
    pub objective: f64,
    /// d loss / d new_log_probs[i].
    pub d_new_log_probs: Vec<f64>,
    /// d loss / d entropies[i].
    pub d_entropies: Vec<f64>,
    /// Fraction of samples whose ratio lies outside `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
    /// Mean of `|ratio - 1|`.
    pub mean_ratio_dev: f64,
}

/// `mean(-min(r A, clip(r, 1-eps, 1+eps) A)) - entropy_coef * mean(H)` with
/// `r = exp(new - old)`.
pub fn ppo_policy_loss(
    old_log_probs: &[f64],
    new_log_probs: &[f64],
    advantages: &[f64],
    entropies: &[f64],
    eps: f64,
    entropy_coef: f64,
) -> Result<PolicyLoss> {
    let n = old_log_probs.len();
    if new_log_probs.len() != n || advantages.len() != n || entropies.len() != n {
        return Err(Error::Training(format!(
            "policy loss inputs disagree in length: old {n}, new {}, adv {}, entropy {}",
            new_log_probs.len(),
            advantages.len(),
            entropies.len()
        )));
    }
    if n == 0 {
        return Err(Error::Training("policy loss over an empty batch".into()));
    }
    let inv = 1.0 / n as f64;
    let mut objective = 0.0;
    let mut d_new = Vec::with_capacity(n);
    let mut clipped = 0usize;
    let mut dev = 0.0;
    for i in 0..n {
        let ratio = (new_log_probs[i] - old_log_probs[i]).exp();
        if !ratio.is_finite() {
            return Err(Error::Training(format!(
                "non-finite probability ratio at sample {i} (old {}, new {})",
                old_log_probs[i], new_log_probs[i]
            )));
        }
        let (obj, d_obj) = clipped_objective(ratio, advantages[i], eps);
        objective += obj * inv;
        d_new.push(-d_obj * inv);
        if (ratio - 1.0).abs() > eps {
            clipped += 1;
        }
        dev += (ratio - 1.0).abs() * inv;
    }
    let mean_entropy = entropies.iter().sum::<f64>() * inv;
    Ok(PolicyLoss {
        loss: -objective - entropy_coef * mean_entropy,
        objective,
        d_new_log_probs: d_new,
        d_entropies: vec![-entropy_coef * inv; n],
        clip_fraction: clipped as f64 * inv,
        mean_ratio_dev: dev,
    })
}

/// `coef * mean((p - g)^2)` and its gradient with respect to each prediction.
pub fn value_loss(predictions: &[f64], returns: &[f64], coef: f64) -> Result<(f64, Vec<f64>)> {
    if predictions.len() != returns.len() {
        return Err(Error::Training(format!(
            "value loss inputs disagree in length: {} vs {}",
            predictions.len(),
            returns.len()
        )));
    }
    if predictions.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / predictions.len() as f64;
    let mut loss = 0.0;
    let grads = predictions
        .iter()
        .zip(returns)
        .map(|(p, g)| {
            let e = p - g;
            loss += coef * e * e * inv;
            2.0 * coef * e * inv
        })
        .collect();
    Ok((loss, grads))
}
