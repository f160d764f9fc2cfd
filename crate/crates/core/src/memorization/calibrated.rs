use serde::{Deserialize, Serialize};

use crate::batch::{dist, Batch};
use crate::error::{Error, Result};

/// Nearest-training-point distance and its calibrated ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedDistance {
    pub nearest_idx: usize,
    pub l2: f64,
    /// `l2` over the mean distance from the nearest training point to its own
    /// `k` nearest training neighbours. Zero over zero is 0; positive over
    /// zero is `+∞` and sets `infinite`.
    pub ratio: f64,
    pub infinite: bool,
}

/// A training set with each row's mean k-nearest-neighbour distance cached.
#[derive(Debug, Clone)]
pub struct TrainIndex {
    data: Batch,
    k: usize,
    local_scale: Vec<f64>,
}

impl TrainIndex {
    pub fn new(data: Batch, k: usize) -> Result<Self> {
        if k == 0 || k >= data.rows() {
            return Err(Error::InvalidArgument(format!(
                "calibrated distance needs 1 <= k < training size, got k = {k} with {} rows",
                data.rows()
            )));
        }
        let n = data.rows();
        let mut local_scale = Vec::with_capacity(n);
        let mut buf = Vec::with_capacity(n - 1);
        for i in 0..n {
            buf.clear();
            buf.extend((0..n).filter(|j| *j != i).map(|j| dist(data.row(i), data.row(j))));
            buf.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            local_scale.push(buf[..k].iter().sum::<f64>() / k as f64);
        }
        Ok(Self { data, k, local_scale })
    }

    /// Index over the distinct rows of `data`, first occurrences in order.
    /// Exact duplicates would otherwise give zero local scales.
    pub fn deduplicated(data: &Batch, k: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut keep = Vec::new();
        for (i, r) in data.iter_rows().enumerate() {
            let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                keep.push(i);
            }
        }
        Self::new(data.select(&keep), k)
    }

    pub fn data(&self) -> &Batch {
        &self.data
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Mean distance from training row `i` to its `k` nearest other rows.
    pub fn local_scale(&self, i: usize) -> f64 {
        self.local_scale[i]
    }

    pub fn nearest(&self, x: &[f64]) -> Result<(usize, f64)> {
        if x.len() != self.data.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.data.dim(),
                got: x.len(),
            });
        }
        let mut best = (0, f64::INFINITY);
        for (i, r) in self.data.iter_rows().enumerate() {
            let d = dist(r, x);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best)
    }

    pub fn query(&self, x: &[f64]) -> Result<CalibratedDistance> {
        let (nearest_idx, l2) = self.nearest(x)?;
        let denom = self.local_scale[nearest_idx];
        let (ratio, infinite) = if denom > 0.0 {
            (l2 / denom, false)
        } else if l2 == 0.0 {
            (0.0, false)
        } else {
            (f64::INFINITY, true)
        };
        Ok(CalibratedDistance {
            nearest_idx,
            l2,
            ratio,
            infinite,
        })
    }
}

/// One-off calibrated distance; build a [`TrainIndex`] for repeated queries.
pub fn calibrated_l2(x: &[f64], trainset: &Batch, k: usize) -> Result<CalibratedDistance> {
    TrainIndex::new(trainset.clone(), k)?.query(x)
}
