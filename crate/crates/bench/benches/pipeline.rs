use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mmhlab_bench::{linear_spec, small_trained, two_class_spec};
use mmhlab_core::diffusion::{sample_reverse, SamplerConfig, Schedule};
use mmhlab_core::memorization::{accumulate_metric, copy_check, CopyConfig, Metric, MetricConfig};
use mmhlab_core::scorenet::{train_score_model, ScoreModel, TrainConfig};
use mmhlab_core::{sample_manifold, Batch};

fn bench_training(c: &mut Criterion) {
    let data = sample_manifold(&linear_spec(2, 1), 256, 1).unwrap().points;
    let cfg = TrainConfig {
        steps: 50,
        batch_size: 100,
        hidden: vec![128, 128, 128],
        ..TrainConfig::default()
    };
    c.bench_function("train 50 steps hidden 128x3", |b| {
        b.iter(|| train_score_model(black_box(&data), Schedule::default(), None, &cfg).unwrap())
    });
}

fn bench_sampling(c: &mut Criterion) {
    let (model, _) = small_trained(2);
    let cfg = SamplerConfig {
        n: 100,
        steps: 50,
        ..SamplerConfig::default()
    };
    c.bench_function("ddim 100 samples x 50 steps", |b| {
        b.iter(|| sample_reverse(&model, black_box(&cfg), None, None).unwrap())
    });
}

fn bench_metrics(c: &mut Criterion) {
    let model = ScoreModel::analytic(two_class_spec(), Schedule::default(), true).unwrap();
    let cfg = MetricConfig {
        n: 8,
        steps: 20,
        ..MetricConfig::default()
    };
    for m in Metric::ALL {
        c.bench_function(&format!("{} n=8 steps=20", m.name()), |b| {
            b.iter(|| accumulate_metric(&model, black_box(&[1.0, 0.0]), m, &cfg).unwrap())
        });
    }
}

fn bench_copy(c: &mut Criterion) {
    let spec = linear_spec(3, 2);
    let sampler = |n: usize, s: u64| -> mmhlab_core::Result<Batch> { Ok(sample_manifold(&spec, n, s)?.points) };
    let cfg = CopyConfig {
        n_mc: 10_000,
        ..CopyConfig::default()
    };
    c.bench_function("copy_check n_mc=1e4", |b| {
        b.iter(|| copy_check(&sampler, &sampler, black_box(&[0.5, 0.0, 0.0]), &cfg).unwrap())
    });
}

criterion_group! {
    name = pipeline;
    config = Criterion::default().sample_size(10);
    targets = bench_training, bench_sampling, bench_metrics, bench_copy
}
criterion_main!(pipeline);
