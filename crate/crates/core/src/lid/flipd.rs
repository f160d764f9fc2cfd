use serde::{Deserialize, Serialize};

use super::{EstimateConfig, Estimator, LidEstimate};
use crate::batch::norm_sq;
use crate::diffusion::schedule::check_open_time;
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::scorenet::{ScoreModel, TraceMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reparam {
    /// `d + σ²(tr ∇s(ψx) + ‖s(ψx)‖²)`.
    Standard,
    /// The same quantity written with `σ̃ = σ/ψ` and `s̃(x) = ψ s(ψx)`.
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlipdConfig {
    pub t0: f64,
    /// `None` selects the exact trace up to 64 dimensions and 64 Hutchinson
    /// probes above.
    pub trace: Option<TraceMode>,
    pub seed: u64,
    pub reparam: Reparam,
    /// Guidance applied when a condition is supplied; plain conditional score otherwise.
    pub guidance: Option<GuidanceConfig>,
}

impl Default for FlipdConfig {
    fn default() -> Self {
        Self {
            t0: 0.05,
            trace: None,
            seed: 0,
            reparam: Reparam::Standard,
            guidance: None,
        }
    }
}

impl FlipdConfig {
    pub fn with_t0(t0: f64) -> Self {
        Self { t0, ..Self::default() }
    }

    pub(crate) fn trace_mode(&self, d: usize) -> TraceMode {
        self.trace.unwrap_or(if d <= 64 {
            TraceMode::Exact
        } else {
            TraceMode::Hutchinson {
                probes: 64,
                seed: self.seed,
            }
        })
    }
}

/// Guided score and its divergence at `(y, t)`:
/// `s∅ + λ(s_c − s∅)` and `tr∇s∅ + λ(tr∇s_c − tr∇s∅)`.
pub fn guided_score_divergence(
    model: &ScoreModel,
    y: &[f64],
    t: f64,
    cond: Option<&[f64]>,
    guidance: Option<GuidanceConfig>,
    mode: TraceMode,
) -> Result<(Vec<f64>, f64)> {
    let Some(c) = cond else {
        return model.score_and_divergence(y, t, None, mode);
    };
    if !model.is_conditional() {
        return Err(Error::Unconditional);
    }
    let lambda = guidance.map_or(1.0, |g| g.lambda);
    if lambda == 1.0 {
        return model.score_and_divergence(y, t, Some(c), mode);
    }
    let (sn, dn) = model.score_and_divergence(y, t, None, mode)?;
    let (sc, dc) = model.score_and_divergence(y, t, Some(c), mode)?;
    let s = sn.iter().zip(&sc).map(|(n, c)| n + lambda * (c - n)).collect();
    Ok((s, dn + lambda * (dc - dn)))
}

/// FLIPD estimate of the model's LID at `x`; negative values are returned as-is.
pub fn flipd(model: &ScoreModel, x: &[f64], cfg: &FlipdConfig, cond: Option<&[f64]>) -> Result<LidEstimate> {
    check_open_time(cfg.t0)?;
    if let Some(g) = cfg.guidance {
        g.validate()?;
    }
    let d = model.ambient_dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    let mode = cfg.trace_mode(d);
    let sched = model.schedule();
    let (psi, sigma_sq) = (sched.psi(cfg.t0), sched.sigma_sq(cfg.t0));
    let y: Vec<f64> = x.iter().map(|v| psi * v).collect();
    let (s, div) = guided_score_divergence(model, &y, cfg.t0, cond, cfg.guidance, mode)?;
    let value = match cfg.reparam {
        Reparam::Standard => d as f64 + sigma_sq * (div + norm_sq(&s)),
        Reparam::Ddim => {
            let st_sq = sched.sigma_tilde_sq(cfg.t0);
            let s_tilde: Vec<f64> = s.iter().map(|v| psi * v).collect();
            let div_tilde = psi * psi * div;
            d as f64 + st_sq * (div_tilde + norm_sq(&s_tilde))
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFinite("FLIPD value".into()));
    }
    let probes = match mode {
        TraceMode::Exact => None,
        TraceMode::Hutchinson { probes, .. } => Some(probes),
    };
    Ok(LidEstimate {
        value,
        estimator: Estimator::Flipd,
        t0: Some(cfg.t0),
        cond: cond.map(<[f64]>::to_vec),
        config: EstimateConfig {
            probes,
            seed: Some(cfg.seed),
            guidance: cond.map(|_| cfg.guidance.map_or(1.0, |g| g.lambda)),
            ..EstimateConfig::default()
        },
        degenerate: false,
    })
}
