use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// How a singular-value spectrum is cut into "nonzero" and "zero".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SingularThreshold {
    /// Percentile `q` (0–100) of the spectrum being thresholded.
    Percentile { q: f64 },
    /// Percentile `q` of all spectra pooled over the evaluation cohort.
    Cohort { q: f64 },
    /// A fixed cutoff.
    Absolute { tau: f64 },
    /// For score matrices only: `factor · √k / σ(t0)`. Stacked scores of
    /// normal directions have singular values of order `√k / σ(t0)`.
    NoiseScaled { factor: f64 },
}

impl Default for SingularThreshold {
    fn default() -> Self {
        SingularThreshold::Percentile { q: 10.0 }
    }
}

impl SingularThreshold {
    pub(crate) fn validate(&self) -> Result<()> {
        let ok = match *self {
            SingularThreshold::Percentile { q } | SingularThreshold::Cohort { q } => (0.0..=100.0).contains(&q),
            SingularThreshold::Absolute { tau } => tau >= 0.0 && tau.is_finite(),
            SingularThreshold::NoiseScaled { factor } => factor > 0.0 && factor.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid singular-value threshold {self:?}"
            )))
        }
    }

    /// Cutoff for one spectrum, given the pooled cohort spectra and the
    /// noise-scaled value when applicable.
    pub(crate) fn cutoff(&self, own: &[f64], pooled: &[f64], noise_scale: Option<f64>) -> Result<f64> {
        Ok(match *self {
            SingularThreshold::Percentile { q } => stats::percentile(own, q).unwrap_or(0.0),
            SingularThreshold::Cohort { q } => stats::percentile(pooled, q).unwrap_or(0.0),
            SingularThreshold::Absolute { tau } => tau,
            SingularThreshold::NoiseScaled { factor } => {
                factor
                    * noise_scale
                        .ok_or_else(|| Error::InvalidArgument("noise-scaled threshold needs a score matrix".into()))?
            }
        })
    }
}

/// Number of values strictly above `cutoff`.
pub(crate) fn count_above(values: &[f64], cutoff: f64) -> usize {
    values.iter().filter(|v| **v > cutoff).count()
}
