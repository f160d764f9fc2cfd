//! Per-point training-data detection scores; larger means more likely a
//! training point.

use serde::{Deserialize, Serialize};

use crate::batch::norm_sq;
use crate::diffusion::schedule::check_open_time;
use crate::error::{Error, Result};
use crate::lid::{flipd, FlipdConfig};
use crate::scorenet::ScoreModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectMethod {
    /// Norm of the CFG vector after a few forward probability-flow steps.
    CfgNorm,
    /// Negated unconditional FLIPD.
    Flipd,
    /// Negated FLIPD of the (guided) conditional model.
    FlipdCond,
}

impl DetectMethod {
    pub fn name(self) -> &'static str {
        match self {
            DetectMethod::CfgNorm => "cfg_norm",
            DetectMethod::Flipd => "flipd",
            DetectMethod::FlipdCond => "flipd_cond",
        }
    }

    pub fn needs_condition(self) -> bool {
        !matches!(self, DetectMethod::Flipd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    /// Forward Euler steps for `cfg_norm`.
    pub k_euler: usize,
    /// Time reached by the forward steps of `cfg_norm`.
    pub t0: f64,
    /// Settings for the FLIPD-based methods.
    pub flipd: FlipdConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            k_euler: 3,
            t0: 0.01,
            flipd: FlipdConfig::default(),
        }
    }
}

/// Carries `x` from `t = 0` to `t0` along the conditional probability-flow ODE
/// `dx/dt = −½β(t)(x + s(x, t, c))`. The score is evaluated at the midpoint of
/// each sub-interval because it is undefined at `t = 0`. With `k = 0` the
/// point is returned unchanged.
pub fn forward_flow(model: &ScoreModel, x: &[f64], c: &[f64], t0: f64, k: usize) -> Result<Vec<f64>> {
    check_open_time(t0)?;
    let sched = model.schedule();
    let h = t0 / k.max(1) as f64;
    let mut y = x.to_vec();
    for i in 0..k {
        let tm = (i as f64 + 0.5) * h;
        let s = model.eval_score(&y, tm, Some(c))?;
        let b = sched.beta(tm);
        for (yj, sj) in y.iter_mut().zip(&s) {
            *yj -= 0.5 * b * h * (*yj + sj);
        }
    }
    Ok(y)
}

pub fn detect_training_point(
    model: &ScoreModel,
    x: &[f64],
    c: Option<&[f64]>,
    method: DetectMethod,
    cfg: &DetectConfig,
) -> Result<f64> {
    if x.len() != model.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.ambient_dim(),
            got: x.len(),
        });
    }
    let cond = match (method.needs_condition(), c) {
        (true, None) => {
            return Err(Error::InvalidArgument(format!("{} needs a condition", method.name())));
        }
        (false, Some(_)) => {
            return Err(Error::InvalidArgument(
                "flipd ignores conditions; use flipd_cond".into(),
            ));
        }
        (_, c) => c,
    };
    let score = match method {
        DetectMethod::CfgNorm => {
            let c = cond.expect("checked above");
            let y = forward_flow(model, x, c, cfg.t0, cfg.k_euler)?;
            let sc = model.eval_score(&y, cfg.t0, Some(c))?;
            let sn = model.eval_score(&y, cfg.t0, None)?;
            let diff: Vec<f64> = sc.iter().zip(&sn).map(|(a, b)| a - b).collect();
            norm_sq(&diff).sqrt()
        }
        DetectMethod::Flipd | DetectMethod::FlipdCond => -flipd(model, x, &cfg.flipd, cond)?.value,
    };
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("{} score", method.name())));
    }
    Ok(score)
}
