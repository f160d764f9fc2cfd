use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Variance-preserving noise schedule with linear `β(t) = β_min + (β_max − β_min) t`.
///
/// The forward process has transition kernel `N(ψ(t) x₀, σ²(t) I)` with
/// `ψ(t) = exp(−½∫₀ᵗβ)` and `σ²(t) = 1 − ψ²(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename = "variance_preserving")]
pub struct Schedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub psi: f64,
    pub sigma: f64,
    /// `σ(t) / ψ(t)`, the noise scale of the DDIM-reparameterized process.
    pub sigma_tilde: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl Schedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        Ok(Self { beta_min, beta_max })
    }

    pub fn id(&self) -> String {
        format!("vp(beta_min={},beta_max={})", self.beta_min, self.beta_max)
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    /// `∫₀ᵗ β(s) ds`.
    pub fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn psi(&self, t: f64) -> f64 {
        (-0.5 * self.beta_integral(t)).exp()
    }

    pub fn sigma_sq(&self, t: f64) -> f64 {
        -(-self.beta_integral(t)).exp_m1()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_sq(t).sqrt()
    }

    pub fn sigma_tilde_sq(&self, t: f64) -> f64 {
        self.beta_integral(t).exp_m1()
    }

    pub fn sigma_tilde(&self, t: f64) -> f64 {
        self.sigma_tilde_sq(t).sqrt()
    }

    /// Drift coefficient of `f(x, t) = −½ β(t) x`.
    pub fn drift_coef(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    /// Diffusion coefficient `g(t) = √β(t)`.
    pub fn diffusion(&self, t: f64) -> f64 {
        self.beta(t).sqrt()
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(ScheduleValues {
            psi: self.psi(t),
            sigma: self.sigma(t),
            sigma_tilde: self.sigma_tilde(t),
        })
    }
}

/// Validates a score-evaluation time, which must lie in `(0, 1]`.
pub(crate) fn check_open_time(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange(t))
    }
}

/// Draws `x_t = ψ(t) x + σ(t) ε` with `ε` standard normal from `seed`.
pub fn forward_perturb(x: &[f64], schedule: &Schedule, t: f64, seed: u64) -> Result<Vec<f64>> {
    check_open_time(t)?;
    let mut r = rng::rng(seed);
    Ok(perturb_with(x, schedule, t, &mut r))
}

pub(crate) fn perturb_with(x: &[f64], schedule: &Schedule, t: f64, r: &mut rng::LabRng) -> Vec<f64> {
    let psi = schedule.psi(t);
    let sigma = schedule.sigma(t);
    x.iter().map(|v| psi * v + sigma * rng::standard_normal(r)).collect()
}
