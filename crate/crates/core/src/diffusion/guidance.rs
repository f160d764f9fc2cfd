use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::scorenet::ScoreModel;

/// Classifier-free guidance strength. The null condition `∅` is the zero
/// vector of the model's conditioning space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl GuidanceConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let g = Self { lambda };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "guidance strength must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `s(x,t,∅) + λ (s(x,t,c) − s(x,t,∅))`.
pub fn cfg_score(model: &ScoreModel, x: &[f64], t: f64, c: &[f64], guidance: GuidanceConfig) -> Result<Vec<f64>> {
    if !model.is_conditional() {
        return Err(Error::Unconditional);
    }
    guidance.validate()?;
    let null = model.eval_score(x, t, None)?;
    let cond = model.eval_score(x, t, Some(c))?;
    Ok(mix(&null, &cond, guidance.lambda))
}

/// Both parts of the guided score: `(s^CFG, s(·,∅), s(·,c))`.
pub fn cfg_parts(
    model: &ScoreModel,
    x: &[f64],
    t: f64,
    c: &[f64],
    guidance: GuidanceConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if !model.is_conditional() {
        return Err(Error::Unconditional);
    }
    guidance.validate()?;
    let null = model.eval_score(x, t, None)?;
    let cond = model.eval_score(x, t, Some(c))?;
    Ok((mix(&null, &cond, guidance.lambda), null, cond))
}

/// Row-wise guided scores at a shared `(t, c)`.
pub(crate) fn cfg_batch(model: &ScoreModel, xs: &Batch, t: f64, c: &[f64], guidance: GuidanceConfig) -> Result<Batch> {
    let null = model.eval_batch(xs, t, None)?;
    let cond = model.eval_batch(xs, t, Some(c))?;
    Batch::new(
        xs.rows(),
        xs.dim(),
        mix(null.as_slice(), cond.as_slice(), guidance.lambda),
    )
}

/// λ = 0, λ = 1 and `c = ∅` reproduce the unguided scores bit for bit.
fn mix(null: &[f64], cond: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 1.0 {
        return cond.to_vec();
    }
    null.iter().zip(cond).map(|(n, c)| n + lambda * (c - n)).collect()
}
