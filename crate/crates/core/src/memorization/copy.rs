use serde::{Deserialize, Serialize};

use crate::batch::{dist, Batch};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::wilson_interval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub radii: Vec<f64>,
    pub n_mc: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for CopyConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            gamma: 0.1,
            radii: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            n_mc: 10_000,
            confidence: 0.99,
            seed: 0,
        }
    }
}

impl CopyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda > 1.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must exceed 1, got {}", self.lambda));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.radii.is_empty() {
            return bad("radius grid is empty".into());
        }
        if self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) || self.radii.windows(2).any(|w| w[0] >= w[1]) {
            return bad("radii must be positive and strictly increasing".into());
        }
        if self.n_mc < 1000 {
            return bad(format!("n_mc must be at least 1000, got {}", self.n_mc));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad(format!("confidence must lie in (0, 1), got {}", self.confidence));
        }
        Ok(())
    }
}

/// Monte-Carlo ball masses at one radius with Wilson intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusRow {
    pub radius: f64,
    pub p_model: f64,
    pub model_lo: f64,
    pub model_hi: f64,
    pub p_gt: f64,
    pub gt_lo: f64,
    pub gt_hi: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyVerdict {
    pub x0: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub confidence: f64,
    pub n_mc: usize,
    pub rows: Vec<RadiusRow>,
    pub flagged: bool,
    pub witness_radius: Option<f64>,
}

fn ball_counts(points: &Batch, x0: &[f64], radii: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; radii.len()];
    for p in points.iter_rows() {
        let d = dist(p, x0);
        // radii are increasing: a point inside radius i is inside every later one
        if let Some(first) = radii.iter().position(|r| d <= *r) {
            for c in &mut counts[first..] {
                *c += 1;
            }
        }
    }
    counts
}

/// Tests whether the model produces `(λ, γ)`-copies of `x0`: some ball around
/// `x0` carries at least `λ` times the ground-truth mass while its
/// ground-truth mass is at most `γ`, both with interval separation.
///
/// Samplers take `(n, seed)` and return `n` draws.
pub fn copy_check(
    model_sampler: &dyn Fn(usize, u64) -> Result<Batch>,
    gt_sampler: &dyn Fn(usize, u64) -> Result<Batch>,
    x0: &[f64],
    cfg: &CopyConfig,
) -> Result<CopyVerdict> {
    cfg.validate()?;
    let model = model_sampler(cfg.n_mc, rng::derive_seed(cfg.seed, 1))?;
    let gt = gt_sampler(cfg.n_mc, rng::derive_seed(cfg.seed, 2))?;
    for b in [&model, &gt] {
        if b.rows() != cfg.n_mc || b.dim() != x0.len() {
            return Err(Error::DimensionMismatch {
                expected: cfg.n_mc * x0.len(),
                got: b.rows() * b.dim(),
            });
        }
    }
    let mc = ball_counts(&model, x0, &cfg.radii);
    let gc = ball_counts(&gt, x0, &cfg.radii);
    let n = cfg.n_mc as u64;
    let rows: Vec<RadiusRow> = cfg
        .radii
        .iter()
        .zip(mc.iter().zip(&gc))
        .map(|(&radius, (&m, &g))| {
            let (model_lo, model_hi) = wilson_interval(m, n, cfg.confidence);
            let (gt_lo, gt_hi) = wilson_interval(g, n, cfg.confidence);
            RadiusRow {
                radius,
                p_model: m as f64 / n as f64,
                model_lo,
                model_hi,
                p_gt: g as f64 / n as f64,
                gt_lo,
                gt_hi,
                flagged: model_lo >= cfg.lambda * gt_hi && gt_hi <= cfg.gamma,
            }
        })
        .collect();
    let witness_radius = rows.iter().find(|r| r.flagged).map(|r| r.radius);
    Ok(CopyVerdict {
        x0: x0.to_vec(),
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        confidence: cfg.confidence,
        n_mc: cfg.n_mc,
        flagged: witness_radius.is_some(),
        witness_radius,
        rows,
    })
}
