/// Advantages as the explicit (γλ)-weighted sum of one-step TD errors, truncated at
/// the first episode end at or after each step.
///
/// `dones[t]` means step `t` ends its episode; `bootstrap` is the value after the
/// last step when it does not.
pub fn gae_reference(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let value_after = |t: usize| -> f64 {
        if dones[t] {
            0.0
        } else if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap
        }
    };
    let delta: Vec<f64> = (0..n).map(|t| rewards[t] + gamma * value_after(t) - values[t]).collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for l in 0..(n - t) {
                sum += (gamma * lambda).powi(l as i32) * delta[t + l];
                if dones[t + l] {
                    break;
                }
            }
            sum
        })
        .collect()
}

/// Discounted reward-to-go, truncated at episode ends and bootstrapped at the tail.
pub fn discounted_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut ended = false;
            for l in 0..(n - t) {
                sum += gamma.powi(l as i32) * rewards[t + l];
                if dones[t + l] {
                    ended = true;
                    break;
                }
            }
            if !ended {
                sum += gamma.powi((n - t) as i32) * bootstrap;
            }
            sum
        })
        .collect()
}
