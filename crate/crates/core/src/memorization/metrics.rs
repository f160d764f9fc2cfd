//! Trajectory-accumulated memorization metrics and their gradients in `c`.
//!
//! All three metrics are written for the DDIM-reparameterized process
//! `x̃ = x/ψ`, `s̃(x̃) = ψ s(ψx̃)`, `σ̃ = σ/ψ`. Since `σ̃ s̃ = σ s` and
//! `σ̃² tr∇s̃ = σ² tr∇s`, each per-step term is evaluated from the ordinary
//! score at the trajectory state `x`:
//!
//! * `A_CFG`:   `σ̃² ‖s̃^CFG(c) − s̃(∅)‖²`
//! * `A_SCFG`:  `σ̃² ‖s̃^CFG(c)‖²`
//! * `A_FLIPD`: `d + σ̃² (tr∇s̃^CFG(c) + ‖s̃^CFG(c)‖²)`
//!
//! Trajectory states are treated as constants when differentiating in `c`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{dot, norm_sq};
use crate::diffusion::{sample_reverse, GuidanceConfig, SamplerConfig, SamplerKind, Trajectory};
use crate::error::{Error, Result};
use crate::rng;
use crate::scorenet::{conditioning_gradient, CondTape, ScoreModel, TraceMode, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "a_cfg")]
    ACfg,
    #[serde(rename = "a_scfg")]
    AScfg,
    #[serde(rename = "a_flipd")]
    AFlipd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::ACfg, Metric::AScfg, Metric::AFlipd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::ACfg => "a_cfg",
            Metric::AScfg => "a_scfg",
            Metric::AFlipd => "a_flipd",
        }
    }

    pub fn default_scheduling(self) -> Scheduling {
        match self {
            Metric::ACfg | Metric::AScfg => Scheduling::Uniform01,
            Metric::AFlipd => Scheduling::Uniform002,
        }
    }

    /// Whether larger values indicate memorization.
    pub fn higher_is_memorized(self) -> bool {
        !matches!(self, Metric::AFlipd)
    }
}

/// Distribution of accumulation times, discretized as the trajectory step
/// times inside its support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduling {
    /// Uniform on `(0, 1]`.
    Uniform01,
    /// Uniform on `(0, 0.2]`.
    Uniform002,
}

impl Scheduling {
    pub fn upper(self) -> f64 {
        match self {
            Scheduling::Uniform01 => 1.0,
            Scheduling::Uniform002 => 0.2,
        }
    }

    pub fn contains(self, t: f64) -> bool {
        t > 0.0 && t <= self.upper()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Number of trajectories `N`.
    pub n: usize,
    /// Number of DDIM steps `T`.
    pub steps: usize,
    pub lambda: f64,
    /// `None` uses the metric's default scheduling.
    pub scheduling: Option<Scheduling>,
    pub seed: u64,
    pub t_min: f64,
    /// `None`: exact up to 64 dimensions, 64 Hutchinson probes above.
    pub trace: Option<TraceMode>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            n: 8,
            steps: 50,
            lambda: 2.0,
            scheduling: None,
            seed: 0,
            t_min: 1e-3,
            trace: None,
        }
    }
}

impl MetricConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("metric needs N >= 1 and T >= 1".into()));
        }
        GuidanceConfig::new(self.lambda).map(|_| ())
    }

    /// Tangent directions and weights whose weighted `vᵀ∇s v` sum is the trace.
    fn trace_probes(&self, d: usize) -> (Vec<Vec<f64>>, f64) {
        let mode = self.trace.unwrap_or(if d <= 64 {
            TraceMode::Exact
        } else {
            TraceMode::Hutchinson {
                probes: 64,
                seed: rng::derive_seed(self.seed, 0x7ace),
            }
        });
        match mode {
            TraceMode::Exact => {
                let basis = (0..d)
                    .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect();
                (basis, 1.0)
            }
            TraceMode::Hutchinson { probes, seed } => {
                let mut r = rng::rng(seed);
                let p = probes.max(1);
                ((0..p).map(|_| rng::rademacher_vec(&mut r, d)).collect(), 1.0 / p as f64)
            }
        }
    }
}

/// Quantities at one trajectory step of one chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub chain: usize,
    pub step: usize,
    pub t: f64,
    pub in_support: bool,
    /// `σ̃² ‖s̃^CFG − s̃(∅)‖²`.
    pub cfg_term: f64,
    /// `σ̃² ‖s̃^CFG‖²`.
    pub scfg_term: f64,
    /// `σ̃² tr∇s̃^CFG`; absent when the trace was not needed.
    pub trace_term: Option<f64>,
    /// `σ̃ ‖s̃(c) − s̃(∅)‖`, the CFG vector in noise units.
    pub cfg_vector_norm: f64,
    /// `σ̃ ‖s̃^CFG‖`.
    pub cfg_adjusted_norm: f64,
}

impl StepRecord {
    pub fn term(&self, metric: Metric, d: usize) -> Option<f64> {
        match metric {
            Metric::ACfg => Some(self.cfg_term),
            Metric::AScfg => Some(self.scfg_term),
            Metric::AFlipd => self.trace_term.map(|tr| d as f64 + self.scfg_term + tr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    /// Mean of `terms`.
    pub value: f64,
    pub n: usize,
    pub steps: usize,
    pub lambda: f64,
    pub scheduling: Scheduling,
    /// Per-step terms at the in-support steps, chain-major.
    pub terms: Vec<f64>,
    /// Mean in-support term of each chain.
    pub chain_means: Vec<f64>,
    /// All `N·T` step records.
    pub records: Vec<StepRecord>,
}

impl MetricReport {
    /// Standard error of `value` across chains.
    pub fn std_error(&self) -> f64 {
        crate::stats::std_error(&self.chain_means)
    }
}

fn check_model(model: &ScoreModel, c: &[f64]) -> Result<()> {
    if !model.is_conditional() {
        return Err(Error::Unconditional);
    }
    if c.len() != model.cond_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.cond_dim(),
            got: c.len(),
        });
    }
    Ok(())
}

/// `N` guided DDIM trajectories for condition `c`.
pub fn metric_trajectories(model: &ScoreModel, c: &[f64], cfg: &MetricConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_model(model, c)?;
    let sampler = SamplerConfig {
        n: cfg.n,
        steps: cfg.steps,
        kind: SamplerKind::Ddim,
        seed: cfg.seed,
        t_min: cfg.t_min,
        denoise_final: false,
        record_trajectory: true,
    };
    let out = sample_reverse(model, &sampler, Some(c), Some(GuidanceConfig { lambda: cfg.lambda }))?;
    Ok(out.trajectory.expect("trajectory was requested"))
}

fn step_records(
    model: &ScoreModel,
    c: &[f64],
    traj: &Trajectory,
    cfg: &MetricConfig,
    with_trace: bool,
) -> Result<Vec<StepRecord>> {
    let d = model.ambient_dim();
    let lambda = cfg.lambda;
    let (probes, weight) = if with_trace {
        cfg.trace_probes(d)
    } else {
        (Vec::new(), 0.0)
    };
    let sched = model.schedule();
    let per_chain = (0..cfg.n)
        .into_par_iter()
        .map(|chain| {
            let mut out = Vec::with_capacity(cfg.steps);
            for step in 0..cfg.steps {
                let t = traj.times[step];
                let x = traj.states[step].row(chain);
                let (var, sigma) = (sched.sigma_sq(t), sched.sigma(t));
                let (sn, jn) = model.score_jvp(x, t, None, &probes)?;
                let (sc, jc) = model.score_jvp(x, t, Some(c), &probes)?;
                let diff: Vec<f64> = sc.iter().zip(&sn).map(|(a, b)| a - b).collect();
                let guided: Vec<f64> = sn.iter().zip(&diff).map(|(n, df)| n + lambda * df).collect();
                let trace_term = with_trace.then(|| {
                    let tr: f64 = probes
                        .iter()
                        .zip(jn.iter().zip(&jc))
                        .map(|(v, (a, b))| (1.0 - lambda) * dot(v, a) + lambda * dot(v, b))
                        .sum();
                    var * weight * tr
                });
                out.push(StepRecord {
                    chain,
                    step,
                    t,
                    in_support: false,
                    cfg_term: var * lambda * lambda * norm_sq(&diff),
                    scfg_term: var * norm_sq(&guided),
                    trace_term,
                    cfg_vector_norm: sigma * norm_sq(&diff).sqrt(),
                    cfg_adjusted_norm: sigma * norm_sq(&guided).sqrt(),
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_chain.into_iter().flatten().collect())
}

fn report_from(
    metric: Metric,
    d: usize,
    cfg: &MetricConfig,
    scheduling: Scheduling,
    mut records: Vec<StepRecord>,
) -> Result<MetricReport> {
    for r in &mut records {
        r.in_support = scheduling.contains(r.t);
    }
    let mut terms = Vec::new();
    let mut chain_means = Vec::with_capacity(cfg.n);
    for chain in 0..cfg.n {
        let mine: Vec<f64> = records
            .iter()
            .filter(|r| r.chain == chain && r.in_support)
            .map(|r| r.term(metric, d).expect("trace recorded for FLIPD"))
            .collect();
        if mine.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no trajectory step falls inside the {scheduling:?} scheduling support"
            )));
        }
        chain_means.push(mine.iter().sum::<f64>() / mine.len() as f64);
        terms.extend(mine);
    }
    let value = terms.iter().sum::<f64>() / terms.len() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{} value", metric.name())));
    }
    Ok(MetricReport {
        metric,
        value,
        n: cfg.n,
        steps: cfg.steps,
        lambda: cfg.lambda,
        scheduling,
        terms,
        chain_means,
        records,
    })
}

/// Runs `N` guided DDIM trajectories and accumulates one metric.
pub fn accumulate_metric(model: &ScoreModel, c: &[f64], metric: Metric, cfg: &MetricConfig) -> Result<MetricReport> {
    let traj = metric_trajectories(model, c, cfg)?;
    metric_on_trajectory(model, c, &traj, metric, cfg)
}

/// All three metrics on shared trajectories and a shared scheduling.
pub fn accumulate_all(
    model: &ScoreModel,
    c: &[f64],
    cfg: &MetricConfig,
    scheduling: Scheduling,
) -> Result<[MetricReport; 3]> {
    let traj = metric_trajectories(model, c, cfg)?;
    let records = step_records(model, c, &traj, cfg, true)?;
    let d = model.ambient_dim();
    Ok([
        report_from(Metric::ACfg, d, cfg, scheduling, records.clone())?,
        report_from(Metric::AScfg, d, cfg, scheduling, records.clone())?,
        report_from(Metric::AFlipd, d, cfg, scheduling, records)?,
    ])
}

/// All three metrics on shared trajectories, each under its own scheduling
/// (`cfg.scheduling` overrides all three when set).
pub fn accumulate_each(model: &ScoreModel, c: &[f64], cfg: &MetricConfig) -> Result<[MetricReport; 3]> {
    let traj = metric_trajectories(model, c, cfg)?;
    let records = step_records(model, c, &traj, cfg, true)?;
    let d = model.ambient_dim();
    let report = |m: Metric, r| report_from(m, d, cfg, cfg.scheduling.unwrap_or(m.default_scheduling()), r);
    Ok([
        report(Metric::ACfg, records.clone())?,
        report(Metric::AScfg, records.clone())?,
        report(Metric::AFlipd, records)?,
    ])
}

/// The metric together with its gradient with respect to `c`.
pub fn metric_gradient(
    model: &ScoreModel,
    c: &[f64],
    metric: Metric,
    cfg: &MetricConfig,
) -> Result<(MetricReport, Vec<f64>)> {
    let traj = metric_trajectories(model, c, cfg)?;
    metric_gradient_on_trajectory(model, c, &traj, metric, cfg)
}

fn check_trajectory(traj: &Trajectory, cfg: &MetricConfig) -> Result<()> {
    cfg.validate()?;
    if traj.times.len() < cfg.steps || traj.states.len() < cfg.steps || traj.states.iter().any(|b| b.rows() != cfg.n) {
        return Err(Error::InvalidArgument(format!(
            "trajectory does not hold {} chains over {} steps",
            cfg.n, cfg.steps
        )));
    }
    Ok(())
}

/// Evaluates a metric for `c` on fixed trajectory states.
pub fn metric_on_trajectory(
    model: &ScoreModel,
    c: &[f64],
    traj: &Trajectory,
    metric: Metric,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    check_model(model, c)?;
    check_trajectory(traj, cfg)?;
    let scheduling = cfg.scheduling.unwrap_or(metric.default_scheduling());
    let records = step_records(model, c, traj, cfg, metric == Metric::AFlipd)?;
    report_from(metric, model.ambient_dim(), cfg, scheduling, records)
}

/// [`metric_on_trajectory`] and its gradient in `c` with the states held fixed.
pub fn metric_gradient_on_trajectory(
    model: &ScoreModel,
    c: &[f64],
    traj: &Trajectory,
    metric: Metric,
    cfg: &MetricConfig,
) -> Result<(MetricReport, Vec<f64>)> {
    let report = metric_on_trajectory(model, c, traj, metric, cfg)?;
    let scheduling = report.scheduling;
    let with_trace = metric == Metric::AFlipd;
    let d = model.ambient_dim();
    let lambda = cfg.lambda;
    let (probes, weight) = if with_trace {
        cfg.trace_probes(d)
    } else {
        (Vec::new(), 0.0)
    };
    let sched = *model.schedule();
    let mut rec = CondTape::new(model, c)?;
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for chain in 0..cfg.n {
        for step in 0..cfg.steps {
            let t = traj.times[step];
            if !scheduling.contains(t) {
                continue;
            }
            let x = traj.states[step].row(chain);
            let var = sched.sigma_sq(t);
            let (sn, jn) = model.score_jvp(x, t, None, &probes)?;
            let (sc, jc) = rec.score_jvp(x, t, &probes)?;
            let tape = rec.tape();
            let term = match metric {
                Metric::ACfg => {
                    let neg: Vec<f64> = sn.iter().map(|v| -v).collect();
                    let diff = tape.offset(sc, &neg);
                    let sq = tape.sum_sq(diff);
                    tape.scale(sq, var * lambda * lambda)
                }
                Metric::AScfg | Metric::AFlipd => {
                    let base: Vec<f64> = sn.iter().map(|v| (1.0 - lambda) * v).collect();
                    let scaled = tape.scale(sc, lambda);
                    let guided = tape.offset(scaled, &base);
                    let sq = tape.sum_sq(guided);
                    let mut term = tape.scale(sq, var);
                    if metric == Metric::AFlipd {
                        let null_part: f64 = probes.iter().zip(&jn).map(|(v, j)| dot(v, j)).sum();
                        for (v, j) in probes.iter().zip(jc) {
                            let vc = tape.constant(v.clone());
                            let q = tape.dot(vc, j);
                            let q = tape.scale(q, var * weight * lambda);
                            term = tape.add(term, q);
                        }
                        term = tape.offset(term, &[d as f64 + var * weight * (1.0 - lambda) * null_part]);
                    }
                    term
                }
            };
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
            count += 1;
        }
    }
    let total = total.expect("report_from guarantees an in-support step");
    let objective = rec.tape().scale(total, 1.0 / count as f64);
    let grad = conditioning_gradient(model, &rec, objective)?;
    Ok((report, grad))
}
