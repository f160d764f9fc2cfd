//! Shared fixtures for the benchmarks.

use mmhlab_core::diffusion::Schedule;
use mmhlab_core::manifolds::{Component, ComponentKind, ManifoldSpec};
use mmhlab_core::scorenet::{train_score_model, ScoreModel, TrainConfig};
use mmhlab_core::{sample_manifold, Batch};

/// Rank-`r` Gaussian in `R^d` through a fixed offset.
pub fn linear_spec(d: usize, r: usize) -> ManifoldSpec {
    let mut mean = vec![0.0; d];
    mean[0] = 0.5;
    ManifoldSpec::linear_gaussian(d, r, mean, 7).expect("valid linear spec")
}

/// Two labeled classes: a point mass and a line.
pub fn two_class_spec() -> ManifoldSpec {
    ManifoldSpec::new(
        2,
        vec![
            Component::new(
                0.5,
                ComponentKind::PointMass {
                    location: vec![2.0, 0.0],
                },
            )
            .with_class(0),
            Component::new(
                0.5,
                ComponentKind::gaussian_from_basis(vec![-2.0, 0.0], &[vec![0.0, 1.0]], &[1.0]),
            )
            .with_class(1),
        ],
    )
    .expect("valid two-class spec")
}

/// A small network trained briefly on a rank-1 Gaussian in `R^d`.
pub fn small_trained(d: usize) -> (ScoreModel, Batch) {
    let data = sample_manifold(&linear_spec(d, 1), 256, 1).expect("samples").points;
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 64,
        hidden: vec![64, 64],
        ..TrainConfig::default()
    };
    let model = train_score_model(&data, Schedule::default(), None, &cfg).expect("training");
    (model, data)
}
