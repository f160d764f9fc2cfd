//! Component attribution from conditioning gradients, prompt mitigation by
//! resampling components, and direct optimization of the conditioning.

use serde::{Deserialize, Serialize};

use super::metrics::{accumulate_metric, metric_gradient, Metric, MetricConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::scorenet::ScoreModel;

/// Splits a conditioning vector into `m` contiguous component slices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub widths: Vec<usize>,
}

impl Partition {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "partition needs m >= 1 components of positive width".into(),
            ));
        }
        Ok(Self { widths })
    }

    /// `m` components of equal width `w`.
    pub fn uniform(m: usize, w: usize) -> Result<Self> {
        Self::new(vec![w; m])
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn total(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn range(&self, j: usize) -> std::ops::Range<usize> {
        let start: usize = self.widths[..j].iter().sum();
        start..start + self.widths[j]
    }

    fn check(&self, c: &[f64]) -> Result<()> {
        if self.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "partition needs m >= 1 components of positive width".into(),
            ));
        }
        if self.total() != c.len() {
            return Err(Error::DimensionMismatch {
                expected: self.total(),
                got: c.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// Non-negative, summing to one.
    pub weights: Vec<f64>,
    /// Set when the gradient vanished (up to `1e-12·max(1, |metric|)`) and the
    /// weights fell back to uniform.
    pub degenerate: bool,
    pub metric_value: f64,
    pub gradient: Vec<f64>,
}

/// Weights proportional to the ℓ2 norm of the metric gradient on each slice.
pub fn token_attribution(
    model: &ScoreModel,
    c: &[f64],
    partition: &Partition,
    metric: Metric,
    cfg: &MetricConfig,
) -> Result<Attribution> {
    partition.check(c)?;
    let (report, gradient) = metric_gradient(model, c, metric, cfg)?;
    let mags: Vec<f64> = (0..partition.len())
        .map(|j| gradient[partition.range(j)].iter().map(|g| g * g).sum::<f64>().sqrt())
        .collect();
    let total: f64 = mags.iter().sum();
    let m = partition.len();
    // Gradients at rounding level of the metric count as zero.
    let floor = 1e-12 * report.value.abs().max(1.0);
    let (weights, degenerate) = if total > floor && total.is_finite() {
        (mags.iter().map(|v| v / total).collect(), false)
    } else {
        (vec![1.0 / m as f64; m], true)
    };
    Ok(Attribution {
        weights,
        degenerate,
        metric_value: report.value,
        gradient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationStrategy {
    Attribution,
    Random,
}

/// Distribution of a fresh component slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "prior", rename_all = "snake_case")]
pub enum ComponentPrior {
    /// Independent standard normal entries.
    StandardNormal,
    /// A uniformly chosen entry of the component's own candidate list other
    /// than its current value; components with a missing or empty list draw
    /// standard normal entries.
    Pools { pools: Vec<Vec<Vec<f64>>> },
}

impl ComponentPrior {
    fn draw(&self, j: usize, current: &[f64], r: &mut rng::LabRng) -> Result<Vec<f64>> {
        let width = current.len();
        match self {
            ComponentPrior::StandardNormal => Ok(rng::normal_vec(r, width)),
            ComponentPrior::Pools { pools } => {
                let Some(pool) = pools.get(j).filter(|p| !p.is_empty()) else {
                    return Ok(rng::normal_vec(r, width));
                };
                // A replacement must change the component when the pool allows it.
                let others: Vec<&Vec<f64>> = pool.iter().filter(|v| v.as_slice() != current).collect();
                let pick = if others.is_empty() {
                    &pool[rng::below(r, pool.len())]
                } else {
                    others[rng::below(r, others.len())]
                };
                if pick.len() != width {
                    return Err(Error::DimensionMismatch {
                        expected: width,
                        got: pick.len(),
                    });
                }
                Ok(pick.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mitigation {
    pub c: Vec<f64>,
    /// Replaced components in selection order.
    pub selected: Vec<usize>,
    pub attribution: Option<Attribution>,
}

/// Draws `k` indices without replacement, each proportional to the remaining
/// weights (uniform over the rest once they are exhausted).
fn sample_without_replacement(weights: &[f64], k: usize, r: &mut rng::LabRng) -> Vec<usize> {
    let mut left: Vec<usize> = (0..weights.len()).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = left.iter().map(|&i| weights[i]).sum();
        let pos = if total > 0.0 {
            let mut u = rng::uniform(r) * total;
            let mut pos = left.len() - 1;
            for (p, &i) in left.iter().enumerate() {
                if u < weights[i] {
                    pos = p;
                    break;
                }
                u -= weights[i];
            }
            // Rounding may leave `u` past the last positive weight.
            while weights[left[pos]] <= 0.0 && pos > 0 {
                pos -= 1;
            }
            pos
        } else {
            rng::below(r, left.len())
        };
        out.push(left.remove(pos));
    }
    out
}

/// Replaces `k` components of `c` with prior draws, choosing them in
/// proportion to `weights` (uniformly when `None`). Returns the new vector and
/// the replaced components in selection order.
pub fn perturb_components(
    c: &[f64],
    partition: &Partition,
    weights: Option<&[f64]>,
    k: usize,
    prior: &ComponentPrior,
    seed: u64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    partition.check(c)?;
    let m = partition.len();
    if k > m {
        return Err(Error::InvalidArgument(format!("cannot replace {k} of {m} components")));
    }
    let uniform = vec![1.0; m];
    let weights = weights.unwrap_or(&uniform);
    if weights.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: weights.len(),
        });
    }
    let mut r = rng::rng(seed);
    let selected = sample_without_replacement(weights, k, &mut r);
    let mut out = c.to_vec();
    for &j in &selected {
        let range = partition.range(j);
        let fresh = prior.draw(j, &c[range.clone()], &mut r)?;
        out[range].copy_from_slice(&fresh);
    }
    Ok((out, selected))
}

/// Replaces `k` components of `c` with fresh prior draws.
#[allow(clippy::too_many_arguments)]
pub fn mitigate_prompt(
    model: &ScoreModel,
    c: &[f64],
    partition: &Partition,
    metric: Metric,
    cfg: &MetricConfig,
    k: usize,
    strategy: MitigationStrategy,
    prior: &ComponentPrior,
    seed: u64,
) -> Result<Mitigation> {
    partition.check(c)?;
    let m = partition.len();
    if k > m {
        return Err(Error::InvalidArgument(format!("cannot replace {k} of {m} components")));
    }
    if k == 0 {
        return Ok(Mitigation {
            c: c.to_vec(),
            selected: Vec::new(),
            attribution: None,
        });
    }
    let attribution = match strategy {
        MitigationStrategy::Attribution => Some(token_attribution(model, c, partition, metric, cfg)?),
        MitigationStrategy::Random => None,
    };
    let (out, selected) = perturb_components(
        c,
        partition,
        attribution.as_ref().map(|a| a.weights.as_slice()),
        k,
        prior,
        seed,
    )?;
    Ok(Mitigation {
        c: out,
        selected,
        attribution,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeStep {
    pub c: Vec<f64>,
    pub value: f64,
    pub std_error: f64,
}

/// Adam on the metric, moving toward less memorization: ascent for `A_FLIPD`,
/// descent for the CFG-norm metrics. Every evaluation reuses the trajectory
/// seed `seed`, so `lr = 0` yields identical values.
pub fn optimize_conditioning(
    model: &ScoreModel,
    c0: &[f64],
    metric: Metric,
    cfg: &MetricConfig,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<OptimizeStep>> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {lr} must be finite and non-negative"
        )));
    }
    let cfg = MetricConfig { seed, ..cfg.clone() };
    let sign = if metric.higher_is_memorized() { -1.0 } else { 1.0 };
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut c = c0.to_vec();
    let mut m1 = vec![0.0; c.len()];
    let mut m2 = vec![0.0; c.len()];
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        if step == steps {
            let report = accumulate_metric(model, &c, metric, &cfg)?;
            out.push(OptimizeStep {
                c: c.clone(),
                value: report.value,
                std_error: report.std_error(),
            });
            break;
        }
        let (report, grad) = metric_gradient(model, &c, metric, &cfg)?;
        out.push(OptimizeStep {
            c: c.clone(),
            value: report.value,
            std_error: report.std_error(),
        });
        let n = (step + 1) as i32;
        for i in 0..c.len() {
            let g = sign * grad[i];
            m1[i] = b1 * m1[i] + (1.0 - b1) * g;
            m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
            let mh = m1[i] / (1.0 - b1.powi(n));
            let vh = m2[i] / (1.0 - b2.powi(n));
            c[i] += lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(out)
}
