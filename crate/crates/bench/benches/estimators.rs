use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmhlab_bench::{linear_spec, small_trained};
use mmhlab_core::diffusion::Schedule;
use mmhlab_core::lid::{flipd, nb_lid, FlipdConfig, LpcaConfig, LpcaIndex, NbConfig, SingularThreshold};
use mmhlab_core::sample_manifold;
use mmhlab_core::scorenet::ScoreModel;

fn bench_flipd(c: &mut Criterion) {
    let mut group = c.benchmark_group("flipd");
    for d in [2, 10] {
        let spec = linear_spec(d, 1);
        let analytic = ScoreModel::analytic(spec.clone(), Schedule::default(), false).unwrap();
        let (trained, data) = small_trained(d);
        let x = data.row(0).to_vec();
        let cfg = FlipdConfig::with_t0(0.05);
        group.bench_with_input(BenchmarkId::new("analytic", d), &d, |b, _| {
            b.iter(|| flipd(&analytic, black_box(&x), &cfg, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("mlp", d), &d, |b, _| {
            b.iter(|| flipd(&trained, black_box(&x), &cfg, None).unwrap())
        });
    }
    group.finish();
}

fn bench_nb(c: &mut Criterion) {
    let spec = linear_spec(5, 2);
    let model = ScoreModel::analytic(spec.clone(), Schedule::default(), false).unwrap();
    let x = sample_manifold(&spec, 1, 3).unwrap().points.row(0).to_vec();
    let cfg = NbConfig {
        t0: 0.01,
        threshold: SingularThreshold::NoiseScaled { factor: 0.3 },
        ..NbConfig::default()
    };
    c.bench_function("nb_lid analytic d=5", |b| {
        b.iter(|| nb_lid(&model, black_box(&x), &cfg, None).unwrap())
    });
}

fn bench_lpca(c: &mut Criterion) {
    let spec = linear_spec(10, 2);
    let data = sample_manifold(&spec, 5000, 2).unwrap().points;
    let x = data.row(0).to_vec();
    let index = LpcaIndex::new(data, LpcaConfig::default()).unwrap();
    c.bench_function("lpca query n=5000 d=10", |b| {
        b.iter(|| index.estimate(black_box(&x)).unwrap())
    });
}

criterion_group! {
    name = estimators;
    config = Criterion::default().sample_size(20);
    targets = bench_flipd, bench_nb, bench_lpca
}
criterion_main!(estimators);
