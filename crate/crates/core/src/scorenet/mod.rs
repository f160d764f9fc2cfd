//! Score functions `s(x, t, c)`: trained networks and closed-form mixtures
//! behind one interface, with divergence and conditioning gradients.

mod checkpoint;
pub(crate) mod mlp;
mod model;
mod tape;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_checked, params_hash, save_checkpoint,
    CheckpointManifest, CHECKPOINT_VERSION,
};
pub use mlp::Architecture;
pub use model::{conditioning_gradient, AnalyticModel, CondTape, ModelKind, ScoreModel, TraceMode, TrainedModel};
pub use tape::{Tape, Var};
pub use train::{dsm_loss, train_score_model, train_score_model_logged, TrainConfig, TrainOutcome};
