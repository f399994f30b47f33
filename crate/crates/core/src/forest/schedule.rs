use serde::{Deserialize, Serialize};

use super::{ForestError, Method};

/// Variance-preserving noise schedule with a linear `beta(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 8.0,
        }
    }
}

impl VpSchedule {
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        (-0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min).exp()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        let a = self.alpha(t);
        (1.0 - a * a).max(0.0).sqrt()
    }
}

/// `n_t` evenly spaced times from `eps` to 1 inclusive.
pub fn time_grid(n_t: usize, eps: f64) -> Vec<f32> {
    if n_t == 1 {
        return vec![1.0];
    }
    (0..n_t)
        .map(|i| {
            if i + 1 == n_t {
                1.0
            } else {
                (eps + (1.0 - eps) * i as f64 / (n_t - 1) as f64) as f32
            }
        })
        .collect()
}

fn check(x0: &[f32], x1: &[f32]) -> Result<(), ForestError> {
    if x0.len() != x1.len() {
        return Err(ForestError::ShapeMismatch(format!(
            "x0 has {} values, x1 has {}",
            x0.len(),
            x1.len()
        )));
    }
    Ok(())
}

/// Noisy input at time `t`.
pub fn make_xt(x0: &[f32], x1: &[f32], t: f32, method: Method, sched: &VpSchedule) -> Result<Vec<f32>, ForestError> {
    check(x0, x1)?;
    let mut out = Vec::with_capacity(x0.len());
    match method {
        Method::Flow => out.extend(x0.iter().zip(x1).map(|(&a, &b)| t * b + (1.0 - t) * a)),
        Method::Diffusion => {
            let (al, si) = (sched.alpha(t as f64) as f32, sched.sigma(t as f64) as f32);
            out.extend(x0.iter().zip(x1).map(|(&a, &b)| al * a + si * b));
        }
    }
    Ok(out)
}

/// Regression target at time `t`: `x1 - x0` for flow, the conditional score
/// `-x1 / sigma_t` for diffusion.
pub fn make_targets(
    x0: &[f32],
    x1: &[f32],
    t: f32,
    method: Method,
    sched: &VpSchedule,
) -> Result<Vec<f32>, ForestError> {
    check(x0, x1)?;
    match method {
        Method::Flow => Ok(x0.iter().zip(x1).map(|(&a, &b)| b - a).collect()),
        Method::Diffusion => {
            let s = sched.sigma(t as f64);
            if !(s > 0.0) {
                return Err(ForestError::DegenerateTime(t));
            }
            let s = s as f32;
            Ok(x1.iter().map(|&b| -b / s).collect())
        }
    }
}
