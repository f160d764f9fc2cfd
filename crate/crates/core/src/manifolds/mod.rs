//! Synthetic ground-truth distributions with exact LID oracles, closed-form
//! noised scores and samplers.

mod analytic;
mod sample;
mod spec;

pub use analytic::{analytic_score, GaussianMixtureScore};
pub use sample::{sample_manifold, LabeledBatch};
pub use spec::{
    random_orthonormal, true_lid, Component, ComponentKind, ManifoldSpec, DEFAULT_SUPPORT_TOL, SPEC_SCHEMA_VERSION,
};
