use serde::{Deserialize, Serialize};

use super::calibrated::TrainIndex;
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::lid::LidEstimate;
use crate::manifolds::{true_lid, ManifoldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemLabel {
    Not,
    Exact,
    Near,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemType {
    None,
    OdMem,
    DdMem,
    Unresolved,
}

impl MemLabel {
    pub fn name(self) -> &'static str {
        match self {
            MemLabel::Not => "not",
            MemLabel::Exact => "exact",
            MemLabel::Near => "near",
        }
    }
}

impl MemType {
    pub fn name(self) -> &'static str {
        match self {
            MemType::None => "none",
            MemType::OdMem => "od_mem",
            MemType::DdMem => "dd_mem",
            MemType::Unresolved => "unresolved",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Ambient distance at or below which a sample is an exact copy.
    pub eps_exact: f64,
    /// Calibrated ratio at or below which a sample is a near copy.
    pub tau_near: f64,
    /// Ground-truth LID at or below which memorization can be data-driven.
    pub dd_cutoff: f64,
    pub margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eps_exact: 1e-2,
            tau_near: 1.0 / 3.0,
            dd_cutoff: 1.0,
            margin: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.eps_exact, self.tau_near, self.dd_cutoff, self.margin]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.eps_exact > self.tau_near {
            return Err(Error::InvalidArgument(format!(
                "thresholds must be non-negative with eps_exact <= tau_near: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Source of ground-truth LID, evaluated at the nearest training point.
#[derive(Debug, Clone, Copy)]
pub enum GroundTruth<'a> {
    Oracle {
        spec: &'a ManifoldSpec,
        tol: f64,
    },
    /// One value per training row, e.g. local-PCA estimates.
    PerTrainRow(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemRecord {
    pub sample: Vec<f64>,
    pub nearest_train_idx: usize,
    pub l2_distance: f64,
    pub calibrated_ratio: f64,
    pub ratio_infinite: bool,
    pub label: MemLabel,
    pub lid_model: LidEstimate,
    pub lid_gt: Option<f64>,
    pub mem_type: MemType,
}

pub fn label_of(l2: f64, ratio: f64, th: &Thresholds) -> MemLabel {
    if l2 <= th.eps_exact {
        MemLabel::Exact
    } else if ratio <= th.tau_near {
        MemLabel::Near
    } else {
        MemLabel::Not
    }
}

pub fn mem_type_of(label: MemLabel, lid_model: f64, lid_gt: Option<f64>, th: &Thresholds) -> MemType {
    if label == MemLabel::Not {
        return MemType::None;
    }
    let Some(gt) = lid_gt else {
        return MemType::Unresolved;
    };
    if lid_model < gt - th.margin {
        MemType::OdMem
    } else if (lid_model - gt).abs() <= th.margin && gt <= th.dd_cutoff {
        MemType::DdMem
    } else {
        MemType::Unresolved
    }
}

/// Labels each generated row by its distance to the training set and
/// classifies memorized rows by comparing model and ground-truth LID.
pub fn label_and_classify(
    generated: &Batch,
    train: &TrainIndex,
    ground_truth: Option<GroundTruth<'_>>,
    model_lids: &[LidEstimate],
    thresholds: &Thresholds,
) -> Result<Vec<MemRecord>> {
    thresholds.validate()?;
    if model_lids.len() != generated.rows() {
        return Err(Error::DimensionMismatch {
            expected: generated.rows(),
            got: model_lids.len(),
        });
    }
    if let Some(GroundTruth::PerTrainRow(v)) = ground_truth {
        if v.len() != train.data().rows() {
            return Err(Error::DimensionMismatch {
                expected: train.data().rows(),
                got: v.len(),
            });
        }
    }
    generated
        .iter_rows()
        .zip(model_lids)
        .map(|(x, lid)| {
            let cd = train.query(x)?;
            let lid_gt = match ground_truth {
                None => None,
                Some(GroundTruth::PerTrainRow(v)) => Some(v[cd.nearest_idx]),
                Some(GroundTruth::Oracle { spec, tol }) => {
                    Some(true_lid(spec, train.data().row(cd.nearest_idx), tol)? as f64)
                }
            };
            let label = label_of(cd.l2, cd.ratio, thresholds);
            Ok(MemRecord {
                sample: x.to_vec(),
                nearest_train_idx: cd.nearest_idx,
                l2_distance: cd.l2,
                calibrated_ratio: cd.ratio,
                ratio_infinite: cd.infinite,
                label,
                lid_model: lid.clone(),
                lid_gt,
                mem_type: mem_type_of(label, lid.value, lid_gt, thresholds),
            })
        })
        .collect()
}
