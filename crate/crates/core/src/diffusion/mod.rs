//! Noise schedule, forward perturbation, reverse samplers and classifier-free
//! guidance.

mod guidance;
mod sampler;
pub(crate) mod schedule;

pub use guidance::{cfg_parts, cfg_score, GuidanceConfig};
pub use sampler::{
    sample_reverse, time_grid, write_trajectory_csv, SampleOutput, SamplerConfig, SamplerKind, Trajectory,
};
pub use schedule::{forward_perturb, Schedule, ScheduleValues};
