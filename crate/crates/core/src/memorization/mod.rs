//! Memorization labeling, the (λ,γ)-copy check, trajectory metrics,
//! detection scores, attribution and mitigation.

mod attribution;
mod calibrated;
mod classify;
mod copy;
mod detect;
mod metrics;

pub use attribution::{
    mitigate_prompt, optimize_conditioning, perturb_components, token_attribution, Attribution, ComponentPrior,
    Mitigation, MitigationStrategy, OptimizeStep, Partition,
};
pub use calibrated::{calibrated_l2, CalibratedDistance, TrainIndex};
pub use classify::{label_and_classify, label_of, mem_type_of, GroundTruth, MemLabel, MemRecord, MemType, Thresholds};
pub use copy::{copy_check, CopyConfig, CopyVerdict, RadiusRow};
pub use detect::{detect_training_point, forward_flow, DetectConfig, DetectMethod};
pub use metrics::{
    accumulate_all, accumulate_each, accumulate_metric, metric_gradient, metric_gradient_on_trajectory,
    metric_on_trajectory, metric_trajectories, Metric, MetricConfig, MetricReport, Scheduling, StepRecord,
};
