use crate::error::{Error, Result};

/// Generalized advantage estimation over one episode.
///
/// `values` carries one trailing bootstrap entry (0 for a terminal state).
/// Returns `(advantages, returns)` with `returns[t] = advantages[t] + values[t]`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Training(format!(
            "GAE needs {} values for {} rewards, got {}",
            rewards.len() + 1,
            rewards.len(),
            values.len()
        )));
    }
    let t_max = rewards.len();
    let mut adv = vec![0.0; t_max];
    let mut next = 0.0;
    for t in (0..t_max).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        next = delta + gamma * lambda * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}
