//! Local intrinsic dimension estimators: FLIPD, normal bundle, local PCA and
//! generator-Jacobian rank.

mod flipd;
mod jacobian;
mod lpca;
mod nb;
mod threshold;

use serde::{Deserialize, Serialize};

pub use flipd::{flipd, guided_score_divergence, FlipdConfig, Reparam};
pub use jacobian::{
    decoder_jacobian_lid, decoder_jacobian_lid_cohort, jacobian_singular_values, FlowDecoder, Generator,
    LinearGenerator,
};
pub use lpca::{lpca_lid, LpcaConfig, LpcaIndex, VarianceRule};
pub use nb::{nb_lid, nb_lid_batch, nb_singular_values, NbConfig};
pub use threshold::SingularThreshold;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Flipd,
    Nb,
    Lpca,
    Jacobian,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Flipd => "flipd",
            Estimator::Nb => "nb",
            Estimator::Lpca => "lpca",
            Estimator::Jacobian => "jacobian",
        }
    }
}

/// Settings an estimate was produced with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidEstimate {
    /// FLIPD values are real and may be negative; the rank-based estimators
    /// return integers in `[0, d]`.
    pub value: f64,
    pub estimator: Estimator,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cond: Option<Vec<f64>>,
    pub config: EstimateConfig,
    /// Set when the estimate fell back to a degenerate case (all-zero score
    /// matrix, too few neighbors).
    #[serde(default)]
    pub degenerate: bool,
}
