//! Reverse-time samplers on a uniform grid from `t = 1` to `t_min`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::guidance::{cfg_batch, GuidanceConfig};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::rng;
use crate::scorenet::ScoreModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Euler–Maruyama on the reverse SDE.
    Sde,
    /// Euler on the probability-flow ODE.
    Ode,
    /// Euler on the ODE of `x̃ = x/ψ`, stepping in `σ̃`.
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n: usize,
    pub steps: usize,
    pub kind: SamplerKind,
    pub seed: u64,
    pub t_min: f64,
    /// Replace the final state by the posterior mean `(x + σ² s) / ψ`.
    pub denoise_final: bool,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n: 100,
            steps: 50,
            kind: SamplerKind::Ddim,
            seed: 0,
            t_min: 1e-3,
            denoise_final: true,
            record_trajectory: false,
        }
    }
}

/// States of every chain at each grid time, in the original (not `x/ψ`) scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Decreasing grid `1 = t_0 > … > t_T = t_min`.
    pub times: Vec<f64>,
    pub states: Vec<Batch>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub samples: Batch,
    pub trajectory: Option<Trajectory>,
}

/// Time grid `t_i = 1 − i (1 − t_min) / T`.
pub fn time_grid(steps: usize, t_min: f64) -> Vec<f64> {
    (0..=steps)
        .map(|i| {
            if i == steps {
                t_min
            } else {
                1.0 - i as f64 * (1.0 - t_min) / steps as f64
            }
        })
        .collect()
}

/// Draws `cfg.n` samples by integrating the reverse process of `model`.
///
/// With `cond` and no guidance the plain conditional score is used; guidance
/// requires a condition.
pub fn sample_reverse(
    model: &ScoreModel,
    cfg: &SamplerConfig,
    cond: Option<&[f64]>,
    guidance: Option<GuidanceConfig>,
) -> Result<SampleOutput> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if !(cfg.t_min > 0.0 && cfg.t_min < 1.0) {
        return Err(Error::InvalidArgument("t_min must lie in (0, 1)".into()));
    }
    if guidance.is_some() && cond.is_none() {
        return Err(Error::InvalidArgument("guidance given without a condition".into()));
    }
    if let Some(g) = guidance {
        g.validate()?;
        if !model.is_conditional() {
            return Err(Error::Unconditional);
        }
    }
    let score = |xs: &Batch, t: f64| -> Result<Batch> {
        match (cond, guidance) {
            (Some(c), Some(g)) => cfg_batch(model, xs, t, c, g),
            (c, None) => model.eval_batch(xs, t, c),
            (None, Some(_)) => unreachable!("checked above"),
        }
    };

    let sched = *model.schedule();
    let d = model.ambient_dim();
    let grid = time_grid(cfg.steps, cfg.t_min);
    let mut r = rng::rng(cfg.seed);
    let mut x = Batch::new(cfg.n, d, rng::normal_vec(&mut r, cfg.n * d))?;
    let mut states = Vec::new();
    if cfg.record_trajectory {
        states.push(x.clone());
    }

    for w in grid.windows(2) {
        let (t, s) = (w[0], w[1]);
        let h = t - s;
        let sc = score(&x, t)?;
        match cfg.kind {
            SamplerKind::Ode => {
                let b = sched.beta(t);
                for (xi, si) in x.as_mut_slice().iter_mut().zip(sc.as_slice()) {
                    *xi += 0.5 * b * h * (*xi + si);
                }
            }
            SamplerKind::Sde => {
                let b = sched.beta(t);
                let noise = (b * h).sqrt();
                for (xi, si) in x.as_mut_slice().iter_mut().zip(sc.as_slice()) {
                    *xi += h * (0.5 * b * *xi + b * si) + noise * rng::standard_normal(&mut r);
                }
            }
            SamplerKind::Ddim => {
                // x̃ = x/ψ, s̃(x̃) = ψ s(x); x̃_s = x̃_t − (σ̃_s − σ̃_t) σ̃_t s̃
                let (psi_t, psi_s) = (sched.psi(t), sched.psi(s));
                let (st_t, st_s) = (sched.sigma_tilde(t), sched.sigma_tilde(s));
                for (xi, si) in x.as_mut_slice().iter_mut().zip(sc.as_slice()) {
                    let xt = *xi / psi_t;
                    let xs = xt - (st_s - st_t) * st_t * psi_t * si;
                    *xi = psi_s * xs;
                }
            }
        }
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sampler state at t = {s}")));
        }
        if cfg.record_trajectory {
            states.push(x.clone());
        }
    }

    if cfg.denoise_final {
        let t = cfg.t_min;
        let sc = score(&x, t)?;
        let (psi, var) = (sched.psi(t), sched.sigma_sq(t));
        for (xi, si) in x.as_mut_slice().iter_mut().zip(sc.as_slice()) {
            *xi = (*xi + var * si) / psi;
        }
    }
    let trajectory = cfg.record_trajectory.then_some(Trajectory { times: grid, states });
    Ok(SampleOutput { samples: x, trajectory })
}

/// Writes `chain, step, t, x0, …` rows for plotting.
pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = traj.states.first().map_or(0, Batch::dim);
    let mut header = vec!["chain".to_string(), "step".into(), "t".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (step, (t, st)) in traj.times.iter().zip(&traj.states).enumerate() {
        for (chain, row) in st.iter_rows().enumerate() {
            let mut rec = vec![chain.to_string(), step.to_string(), t.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
