use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::threshold::count_above;
use super::{EstimateConfig, Estimator, LidEstimate};
use crate::batch::{sq_dist, Batch};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats;

/// Explained variances at or below this fraction of the largest pooled
/// variance are treated as exact zeros.
const NUMERICAL_ZERO: f64 = 1e-12;

/// Pairwise distances beyond this many pairs are subsampled when computing
/// the distance percentile.
const MAX_PAIRS: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum VarianceRule {
    /// Variances above a percentile of all explained variances over the dataset.
    GlobalPercentile,
    /// Variances above `ratio` times the neighborhood's largest variance.
    RelativeToMax { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpcaConfig {
    pub k: usize,
    pub variance_percentile: f64,
    pub distance_percentile: f64,
    pub variance_rule: VarianceRule,
}

impl Default for LpcaConfig {
    fn default() -> Self {
        Self {
            k: 100,
            variance_percentile: 10.0,
            distance_percentile: 10.0,
            variance_rule: VarianceRule::GlobalPercentile,
        }
    }
}

/// A dataset prepared for repeated local-PCA queries: the distance radius
/// and (for the global rule) the variance threshold are computed once.
#[derive(Debug, Clone)]
pub struct LpcaIndex {
    data: Batch,
    cfg: LpcaConfig,
    radius: f64,
    variance_threshold: Option<f64>,
    zero_floor: f64,
}

impl LpcaIndex {
    pub fn new(dataset: Batch, cfg: LpcaConfig) -> Result<Self> {
        if cfg.k < 1 || cfg.k >= dataset.rows() {
            return Err(Error::InvalidArgument(format!(
                "LPCA needs 1 <= k < dataset size, got k = {} with {} rows",
                cfg.k,
                dataset.rows()
            )));
        }
        for q in [cfg.variance_percentile, cfg.distance_percentile] {
            if !(0.0..=100.0).contains(&q) {
                return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
            }
        }
        if let VarianceRule::RelativeToMax { ratio } = cfg.variance_rule {
            if !(0.0..1.0).contains(&ratio) {
                return Err(Error::InvalidArgument(format!("variance ratio {ratio} outside [0, 1)")));
            }
        }
        if !dataset.all_finite() {
            return Err(Error::NonFinite("LPCA dataset".into()));
        }
        let radius = distance_percentile(&dataset, cfg.distance_percentile);
        let mut index = Self {
            data: dataset,
            cfg,
            radius,
            variance_threshold: None,
            zero_floor: 0.0,
        };
        if index.cfg.variance_rule == VarianceRule::GlobalPercentile {
            let mut pooled = Vec::with_capacity(index.data.rows() * index.data.dim());
            for i in 0..index.data.rows() {
                pooled.extend(index.local_variances(index.data.row(i)).0);
            }
            let max = pooled.iter().fold(0.0f64, |a, b| a.max(*b));
            index.zero_floor = NUMERICAL_ZERO * max;
            for v in &mut pooled {
                if *v <= index.zero_floor {
                    *v = 0.0;
                }
            }
            index.variance_threshold = stats::percentile(&pooled, index.cfg.variance_percentile);
        }
        Ok(index)
    }

    pub fn config(&self) -> &LpcaConfig {
        &self.cfg
    }

    /// The neighborhood restriction radius.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// The pooled variance threshold (global rule only).
    pub fn variance_threshold(&self) -> Option<f64> {
        self.variance_threshold
    }

    /// Explained variances of the neighborhood of `x` (decreasing) and the
    /// number of neighbors used.
    fn local_variances(&self, x: &[f64]) -> (Vec<f64>, usize) {
        let mut d: Vec<(f64, usize)> = self
            .data
            .iter_rows()
            .enumerate()
            .map(|(i, r)| (sq_dist(r, x), i))
            .collect();
        let k = self.cfg.k;
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        let knn = &d[..k];
        let r2 = self.radius * self.radius;
        let close: Vec<usize> = knn.iter().filter(|(dd, _)| *dd <= r2).map(|p| p.1).collect();
        let members: Vec<usize> = if close.len() >= 2 {
            close
        } else {
            knn.iter().map(|p| p.1).collect()
        };
        if members.len() < 2 {
            return (vec![0.0; self.data.dim()], members.len());
        }
        (pca_variances(&self.data.select(&members)), members.len())
    }

    pub fn estimate(&self, x: &[f64]) -> Result<LidEstimate> {
        if x.len() != self.data.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.data.dim(),
                got: x.len(),
            });
        }
        let (vars, used) = self.local_variances(x);
        let degenerate = used < 2;
        let (count, cutoff) = if degenerate {
            (0, f64::NAN)
        } else {
            match self.cfg.variance_rule {
                VarianceRule::GlobalPercentile => {
                    let floored: Vec<f64> = vars
                        .iter()
                        .map(|v| if *v <= self.zero_floor { 0.0 } else { *v })
                        .collect();
                    let tau = self.variance_threshold.unwrap_or(0.0);
                    (count_above(&floored, tau), tau)
                }
                VarianceRule::RelativeToMax { ratio } => {
                    let max = vars.first().copied().unwrap_or(0.0);
                    let tau = (ratio * max).max(NUMERICAL_ZERO * max);
                    (if max > 0.0 { count_above(&vars, tau) } else { 0 }, tau)
                }
            }
        };
        Ok(LidEstimate {
            value: count as f64,
            estimator: Estimator::Lpca,
            t0: None,
            cond: None,
            config: EstimateConfig {
                k: Some(self.cfg.k),
                threshold: cutoff.is_finite().then_some(cutoff),
                ..EstimateConfig::default()
            },
            degenerate,
        })
    }
}

/// One-off local-PCA estimate; build an [`LpcaIndex`] for repeated queries.
pub fn lpca_lid(dataset: &Batch, x: &[f64], cfg: &LpcaConfig) -> Result<LidEstimate> {
    LpcaIndex::new(dataset.clone(), cfg.clone())?.estimate(x)
}

/// Covariance eigenvalues, decreasing, clamped at zero.
fn pca_variances(points: &Batch) -> Vec<f64> {
    let d = points.dim();
    let cov = DMatrix::from_row_slice(d, d, &points.covariance());
    let mut ev: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn distance_percentile(data: &Batch, q: f64) -> f64 {
    let n = data.rows();
    let pairs = n * (n - 1) / 2;
    let mut dists = Vec::with_capacity(pairs.min(MAX_PAIRS));
    if pairs <= MAX_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                dists.push(sq_dist(data.row(i), data.row(j)).sqrt());
            }
        }
    } else {
        let mut r = rng::rng(0x1bca);
        while dists.len() < MAX_PAIRS {
            let i = r.random_range(0..n);
            let j = r.random_range(0..n);
            if i != j {
                dists.push(sq_dist(data.row(i), data.row(j)).sqrt());
            }
        }
    }
    stats::percentile(&dists, q).unwrap_or(0.0)
}
