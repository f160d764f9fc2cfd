use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::threshold::{count_above, SingularThreshold};
use super::{EstimateConfig, Estimator, LidEstimate};
use crate::batch::Batch;
use crate::diffusion::schedule::{check_open_time, perturb_with};
use crate::error::{Error, Result};
use crate::rng;
use crate::scorenet::ScoreModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NbConfig {
    pub t0: f64,
    /// Number of perturbed copies; `None` means `4d`.
    pub k: Option<usize>,
    pub threshold: SingularThreshold,
    pub seed: u64,
}

impl Default for NbConfig {
    fn default() -> Self {
        Self {
            t0: 0.1,
            k: None,
            threshold: SingularThreshold::default(),
            seed: 0,
        }
    }
}

impl NbConfig {
    fn k_for(&self, d: usize) -> usize {
        self.k.unwrap_or(4 * d)
    }
}

/// Singular values of the `d × k` matrix of scores at `k` forward-perturbed
/// copies of `x`, in decreasing order.
pub fn nb_singular_values(model: &ScoreModel, x: &[f64], cfg: &NbConfig, cond: Option<&[f64]>) -> Result<Vec<f64>> {
    check_open_time(cfg.t0)?;
    let d = model.ambient_dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    let k = cfg.k_for(d);
    if k == 0 {
        return Err(Error::InvalidArgument("NB needs k >= 1".into()));
    }
    let mut r = rng::rng(cfg.seed);
    let mut rows = Vec::with_capacity(k * d);
    for _ in 0..k {
        rows.extend(perturb_with(x, model.schedule(), cfg.t0, &mut r));
    }
    let perturbed = Batch::new(k, d, rows)?;
    let scores = model.eval_batch(&perturbed, cfg.t0, cond)?;
    // d × k with one score per column
    let m = DMatrix::from_column_slice(d, k, scores.as_slice());
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("NB score matrix".into()));
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

fn noise_scale(model: &ScoreModel, cfg: &NbConfig) -> f64 {
    let k = cfg.k_for(model.ambient_dim()) as f64;
    k.sqrt() / model.schedule().sigma(cfg.t0)
}

fn estimate(model: &ScoreModel, sv: &[f64], cutoff: f64, cfg: &NbConfig, cond: Option<&[f64]>) -> LidEstimate {
    let d = model.ambient_dim();
    let degenerate = sv.iter().all(|v| *v == 0.0);
    if degenerate {
        log::warn!("NB score matrix is identically zero; reporting rank 0");
    }
    let rank = if degenerate { 0 } else { count_above(sv, cutoff) };
    LidEstimate {
        value: (d - rank) as f64,
        estimator: Estimator::Nb,
        t0: Some(cfg.t0),
        cond: cond.map(<[f64]>::to_vec),
        config: EstimateConfig {
            k: Some(cfg.k_for(d)),
            threshold: Some(cutoff),
            seed: Some(cfg.seed),
            ..EstimateConfig::default()
        },
        degenerate,
    }
}

/// Normal-bundle estimate: `d` minus the numerical rank of the stacked scores.
///
/// A cohort threshold degenerates to a cohort of one here; use
/// [`nb_lid_batch`] to pool spectra across points.
pub fn nb_lid(model: &ScoreModel, x: &[f64], cfg: &NbConfig, cond: Option<&[f64]>) -> Result<LidEstimate> {
    cfg.threshold.validate()?;
    let sv = nb_singular_values(model, x, cfg, cond)?;
    let cutoff = cfg.threshold.cutoff(&sv, &sv, Some(noise_scale(model, cfg)))?;
    Ok(estimate(model, &sv, cutoff, cfg, cond))
}

/// NB estimates for every row of `xs`; the perturbation seed of row `i` is
/// derived from `cfg.seed` and `i`.
pub fn nb_lid_batch(model: &ScoreModel, xs: &Batch, cfg: &NbConfig, cond: Option<&[f64]>) -> Result<Vec<LidEstimate>> {
    cfg.threshold.validate()?;
    let spectra = xs
        .iter_rows()
        .enumerate()
        .map(|(i, x)| {
            let row_cfg = NbConfig {
                seed: rng::derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            nb_singular_values(model, x, &row_cfg, cond)
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<f64> = spectra.iter().flatten().copied().collect();
    let scale = noise_scale(model, cfg);
    spectra
        .iter()
        .enumerate()
        .map(|(i, sv)| {
            let cutoff = cfg.threshold.cutoff(sv, &pooled, Some(scale))?;
            let row_cfg = NbConfig {
                seed: rng::derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            Ok(estimate(model, sv, cutoff, &row_cfg, cond))
        })
        .collect()
}
