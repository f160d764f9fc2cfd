//! Toy diffusion models on synthetic manifolds with known local intrinsic
//! dimension: score models, samplers, LID estimators and memorization
//! diagnostics.

pub mod batch;
pub mod diffusion;
pub mod error;
pub mod lab;
pub mod lid;
pub mod manifolds;
pub mod memorization;
pub mod rng;
pub mod scorenet;
pub mod stats;

pub use batch::Batch;
pub use diffusion::{cfg_score, sample_reverse, GuidanceConfig, SamplerConfig, SamplerKind, Schedule};
pub use error::{Error, Result};
pub use manifolds::{sample_manifold, true_lid, LabeledBatch, ManifoldSpec};
pub use scorenet::{ScoreModel, TraceMode, TrainConfig};
