use mmhlab_core::lid::{EstimateConfig, Estimator, LidEstimate};
use mmhlab_core::manifolds::{sample_manifold, Component, ComponentKind, ManifoldSpec};
use mmhlab_core::memorization::{
    accumulate_all, accumulate_metric, calibrated_l2, copy_check, detect_training_point, label_and_classify,
    metric_gradient_on_trajectory, metric_on_trajectory, metric_trajectories, mitigate_prompt, optimize_conditioning,
    token_attribution, ComponentPrior, CopyConfig, DetectConfig, DetectMethod, GroundTruth, MemLabel, MemType, Metric,
    MetricConfig, MitigationStrategy, Partition, Scheduling, Thresholds, TrainIndex,
};
use mmhlab_core::{Batch, Error, Schedule, ScoreModel};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn eye(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn gaussian(mean: Vec<f64>, std: f64) -> ComponentKind {
    let d = mean.len();
    ComponentKind::gaussian_from_basis(mean, &eye(d), &vec![std; d])
}

fn point(location: Vec<f64>) -> ComponentKind {
    ComponentKind::PointMass { location }
}

/// Class 0 is an atom at (1, 0); class 1 a Gaussian blob around (-1, 0).
fn atom_and_blob() -> ScoreModel {
    let spec = ManifoldSpec::new(
        2,
        vec![
            Component::new(0.3, point(vec![1.0, 0.0])).with_class(0),
            Component::new(0.7, gaussian(vec![-1.0, 0.0], 0.3)).with_class(1),
        ],
    )
    .unwrap();
    ScoreModel::analytic(spec, Schedule::default(), true).unwrap()
}

fn lid_estimate(value: f64) -> LidEstimate {
    LidEstimate {
        value,
        estimator: Estimator::Flipd,
        t0: Some(0.05),
        cond: None,
        config: EstimateConfig::default(),
        degenerate: false,
    }
}

#[test]
fn calibrated_ratio_matches_brute_force_on_a_grid() {
    let h = 0.25;
    let mut rows = Vec::new();
    for i in 0..6 {
        for j in 0..5 {
            rows.push(vec![i as f64 * h, j as f64 * h]);
        }
    }
    let train = Batch::from_rows(&rows).unwrap();
    let euclid = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    for k in [1, 3, 4, 7] {
        for q in [
            [0.3 * h, 0.2 * h],
            [2.4 * h, 3.1 * h],
            [5.2 * h, 4.4 * h],
            [1.05 * h, 0.0],
            [-1.0, 2.0],
        ] {
            // Brute-force oracle: nearest row, then its own sorted neighbour distances.
            let (ni, nd) = rows
                .iter()
                .enumerate()
                .map(|(i, r)| (i, euclid(r, &q)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            let mut own: Vec<f64> = rows
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != ni)
                .map(|(_, r)| euclid(r, &rows[ni]))
                .collect();
            own.sort_by(f64::total_cmp);
            let scale = own[..k].iter().sum::<f64>() / k as f64;
            let got = calibrated_l2(&q, &train, k).unwrap();
            assert_eq!(got.nearest_idx, ni);
            assert!((got.l2 - nd).abs() < 1e-12);
            assert!((got.ratio - nd / scale).abs() < 1e-12, "k = {k}, q = {q:?}");
            assert!(!got.infinite);
        }
    }
}

#[test]
fn calibrated_edge_cases() {
    let train = Batch::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]).unwrap();
    let hit = calibrated_l2(&[1.0, 0.0], &train, 2).unwrap();
    assert_eq!((hit.l2, hit.ratio), (0.0, 0.0));
    assert!(matches!(
        calibrated_l2(&[0.0, 0.0], &train, 3),
        Err(Error::InvalidArgument(_))
    ));
    assert!(calibrated_l2(&[0.0, 0.0], &train, 0).is_err());

    let dup = Batch::from_rows(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [5.0, 5.0]]).unwrap();
    let idx = TrainIndex::new(dup, 2).unwrap();
    let on = idx.query(&[0.0, 0.0]).unwrap();
    assert_eq!(on.ratio, 0.0);
    assert!(!on.infinite);
    let near = idx.query(&[0.1, 0.0]).unwrap();
    assert!(near.ratio.is_infinite() && near.infinite);
}

#[test]
fn classification_separates_overfitting_from_data_driven_memorization() {
    let spec = ManifoldSpec::von_mises_mixture(1.0, 4.0, 0.2).unwrap();
    let mut train_rows: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let a = 0.05 * i as f64 - 1.0;
            vec![a.cos(), a.sin()]
        })
        .collect();
    train_rows.push(vec![0.0, 0.0]);
    train_rows.push(vec![0.0, 0.0]);
    let isolated = vec![-1.0, 0.0];
    train_rows.push(isolated.clone());
    let index = TrainIndex::new(Batch::from_rows(&train_rows).unwrap(), 3).unwrap();

    let generated = Batch::from_rows(&[
        vec![0.0, 0.0],
        isolated.clone(),
        vec![(0.12f64).cos() * 1.3, (0.12f64).sin() * 1.3],
    ])
    .unwrap();
    let lids = [lid_estimate(0.05), lid_estimate(0.1), lid_estimate(1.0)];
    let th = Thresholds::default();
    let gt = GroundTruth::Oracle { spec: &spec, tol: 1e-6 };
    let recs = label_and_classify(&generated, &index, Some(gt), &lids, &th).unwrap();
    assert_eq!(recs[0].label, MemLabel::Exact);
    assert_eq!(recs[0].mem_type, MemType::DdMem);
    assert_eq!(recs[0].lid_gt, Some(0.0));
    assert_eq!(recs[1].label, MemLabel::Exact);
    assert_eq!(recs[1].lid_gt, Some(1.0));
    assert_eq!(recs[1].mem_type, MemType::OdMem);
    assert_eq!(recs[2].label, MemLabel::Not);
    assert_eq!(recs[2].mem_type, MemType::None);
    for r in &recs {
        if r.label == MemLabel::Exact {
            assert!(r.l2_distance <= th.eps_exact);
        }
    }

    let blind = label_and_classify(&generated, &index, None, &lids, &th).unwrap();
    assert_eq!(blind[0].mem_type, MemType::Unresolved);
    assert_eq!(blind[1].mem_type, MemType::Unresolved);
    assert_eq!(blind[2].mem_type, MemType::None);

    let bad = Thresholds {
        eps_exact: 0.5,
        tau_near: 0.1,
        ..Thresholds::default()
    };
    assert!(label_and_classify(&generated, &index, None, &lids, &bad).is_err());
    assert!(label_and_classify(&generated, &index, None, &lids[..2], &th).is_err());
}

fn spec_sampler(spec: ManifoldSpec) -> impl Fn(usize, u64) -> mmhlab_core::Result<Batch> {
    move |n, seed| Ok(sample_manifold(&spec, n, seed)?.points)
}

/// Rank-2 Gaussian in R^3 through the origin.
fn plane_gaussian() -> ComponentKind {
    ComponentKind::gaussian_from_basis(vec![0.0; 3], &eye(3)[..2], &[1.0, 1.0])
}

#[test]
fn copy_check_flags_a_tight_kernel_at_a_training_point() {
    let x0 = vec![0.0; 3];
    let gt = ManifoldSpec::new(3, vec![Component::new(1.0, plane_gaussian())]).unwrap();
    let (w, s) = (0.05, 1e-3);
    let model = ManifoldSpec::new(
        3,
        vec![
            Component::new(1.0 - w, plane_gaussian()),
            Component::new(w, gaussian(x0.clone(), s)),
        ],
    )
    .unwrap();
    let cfg = CopyConfig {
        n_mc: 100_000,
        seed: 3,
        ..CopyConfig::default()
    };
    let v = copy_check(&spec_sampler(model), &spec_sampler(gt), &x0, &cfg).unwrap();
    assert!(v.flagged);
    let witness = v.witness_radius.unwrap();

    // Closed-form ball masses: chi-square with 2 dof on the plane, 3 dof for the kernel.
    let chi2 = ChiSquared::new(2.0).unwrap();
    let chi3 = ChiSquared::new(3.0).unwrap();
    let mut oracle_flags = false;
    for row in &v.rows {
        let r2 = row.radius * row.radius;
        let p_gt = chi2.cdf(r2);
        let p_model = (1.0 - w) * p_gt + w * chi3.cdf(r2 / (s * s));
        assert!(
            row.gt_lo <= p_gt && p_gt <= row.gt_hi,
            "gt ball mass at r = {}",
            row.radius
        );
        assert!(
            row.model_lo <= p_model && p_model <= row.model_hi,
            "model ball mass at r = {}",
            row.radius
        );
        oracle_flags |= p_model >= cfg.lambda * p_gt && p_gt <= cfg.gamma;
        if row.radius == witness {
            assert!(p_model >= cfg.lambda * p_gt && p_gt <= cfg.gamma);
        }
    }
    assert!(oracle_flags);
}

#[test]
fn copy_check_accepts_identical_measures() {
    let x0 = vec![0.0; 3];
    let gt = ManifoldSpec::new(3, vec![Component::new(1.0, plane_gaussian())]).unwrap();
    let v = copy_check(
        &spec_sampler(gt.clone()),
        &spec_sampler(gt),
        &x0,
        &CopyConfig::default(),
    )
    .unwrap();
    assert!(!v.flagged);
    assert!(v.witness_radius.is_none());

    // An atom shared by both measures is data-driven, not a copy.
    let atom = ManifoldSpec::von_mises_mixture(1.0, 4.0, 0.2).unwrap();
    let v = copy_check(
        &spec_sampler(atom.clone()),
        &spec_sampler(atom),
        &[0.0, 0.0],
        &CopyConfig::default(),
    )
    .unwrap();
    assert!(!v.flagged);
}

#[test]
fn copy_check_rejects_bad_configs() {
    let gt = ManifoldSpec::point_mass(vec![0.0]);
    let s = spec_sampler(gt);
    for cfg in [
        CopyConfig {
            lambda: 1.0,
            ..CopyConfig::default()
        },
        CopyConfig {
            gamma: 1.0,
            ..CopyConfig::default()
        },
        CopyConfig {
            radii: vec![],
            ..CopyConfig::default()
        },
        CopyConfig {
            radii: vec![0.2, 0.1],
            ..CopyConfig::default()
        },
        CopyConfig {
            n_mc: 999,
            ..CopyConfig::default()
        },
    ] {
        assert!(copy_check(&s, &s, &[0.0], &cfg).is_err(), "{cfg:?}");
    }
}

fn metric_cfg(n: usize, steps: usize) -> MetricConfig {
    MetricConfig {
        n,
        steps,
        lambda: 2.0,
        seed: 11,
        ..MetricConfig::default()
    }
}

#[test]
fn cfg_metric_vanishes_at_the_null_condition() {
    let m = atom_and_blob();
    let r = accumulate_metric(&m, &[0.0, 0.0], Metric::ACfg, &metric_cfg(4, 20)).unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.terms.iter().all(|t| *t == 0.0));
    assert_eq!(r.records.len(), 4 * 20);
    assert_eq!(r.scheduling, Scheduling::Uniform01);
}

#[test]
fn flipd_metric_decomposes_on_shared_trajectories() {
    let m = atom_and_blob();
    for c in [[1.0, 0.0], [0.0, 1.0], [0.4, 0.3]] {
        for sched in [Scheduling::Uniform01, Scheduling::Uniform002] {
            let [cfg_r, scfg, fl] = accumulate_all(&m, &c, &metric_cfg(5, 30), sched).unwrap();
            let trace_mean: f64 = {
                let traces: Vec<f64> = fl
                    .records
                    .iter()
                    .filter(|r| r.in_support)
                    .map(|r| r.trace_term.unwrap())
                    .collect();
                traces.iter().sum::<f64>() / traces.len() as f64
            };
            assert!((fl.value - (2.0 + scfg.value + trace_mean)).abs() < 1e-10);
            let mean_terms = cfg_r.terms.iter().sum::<f64>() / cfg_r.terms.len() as f64;
            assert!((cfg_r.value - mean_terms).abs() < 1e-12);
            assert_eq!(cfg_r.records.len(), 5 * 30);
        }
    }
}

#[test]
fn flipd_scheduling_keeps_only_late_steps() {
    let m = atom_and_blob();
    let r = accumulate_metric(&m, &[1.0, 0.0], Metric::AFlipd, &metric_cfg(2, 20)).unwrap();
    assert_eq!(r.scheduling, Scheduling::Uniform002);
    for rec in &r.records {
        assert_eq!(rec.in_support, rec.t <= 0.2);
    }
    assert_eq!(r.terms.len(), r.records.iter().filter(|x| x.in_support).count());

    let short = MetricConfig {
        scheduling: Some(Scheduling::Uniform002),
        ..metric_cfg(1, 1)
    };
    assert!(accumulate_metric(&m, &[1.0, 0.0], Metric::AFlipd, &short).is_err());
}

#[test]
fn metric_gradients_match_finite_differences_on_fixed_trajectories() {
    let m = atom_and_blob();
    let cfg = metric_cfg(3, 12);
    let c = [0.7, 0.2];
    let traj = metric_trajectories(&m, &c, &cfg).unwrap();
    let h = 1e-5;
    for metric in Metric::ALL {
        let (report, grad) = metric_gradient_on_trajectory(&m, &c, &traj, metric, &cfg).unwrap();
        let direct = metric_on_trajectory(&m, &c, &traj, metric, &cfg).unwrap();
        assert_eq!(report.value, direct.value);
        for j in 0..2 {
            let mut up = c;
            let mut dn = c;
            up[j] += h;
            dn[j] -= h;
            let fu = metric_on_trajectory(&m, &up, &traj, metric, &cfg).unwrap().value;
            let fd = metric_on_trajectory(&m, &dn, &traj, metric, &cfg).unwrap().value;
            let fdiff = (fu - fd) / (2.0 * h);
            let rel = (grad[j] - fdiff).abs() / fdiff.abs().max(1e-8);
            assert!(rel <= 1e-4, "{metric:?} c[{j}]: {} vs {fdiff}", grad[j]);
        }
    }
}

#[test]
fn metrics_reject_bad_inputs() {
    let m = atom_and_blob();
    let c = [1.0, 0.0];
    assert!(accumulate_metric(&m, &c, Metric::ACfg, &metric_cfg(0, 5)).is_err());
    assert!(accumulate_metric(&m, &c, Metric::ACfg, &metric_cfg(2, 0)).is_err());
    assert!(matches!(
        accumulate_metric(&m, &[1.0], Metric::ACfg, &metric_cfg(2, 5)),
        Err(Error::DimensionMismatch { .. })
    ));
    let plain = ScoreModel::analytic(ManifoldSpec::standard_gaussian(2), Schedule::default(), false).unwrap();
    assert!(matches!(
        accumulate_metric(&plain, &[], Metric::ACfg, &metric_cfg(2, 5)),
        Err(Error::Unconditional)
    ));
}

#[test]
fn detectors_follow_the_higher_is_memorized_convention() {
    // An atom at the origin next to a line at height 2.
    let line = ComponentKind::gaussian_from_basis(vec![0.0, 2.0], &eye(2)[..1], &[1.0]);
    let spec = ManifoldSpec::new(
        2,
        vec![Component::new(0.2, point(vec![0.0, 0.0])), Component::new(0.8, line)],
    )
    .unwrap();
    let plain = ScoreModel::analytic(spec, Schedule::default(), false).unwrap();
    let cfg = DetectConfig::default();
    let atom = detect_training_point(&plain, &[0.0, 0.0], None, DetectMethod::Flipd, &cfg).unwrap();
    assert!(atom.abs() < 0.05, "raw FLIPD at the atom should vanish: {atom}");
    for a in [-1.0, 0.5, 3.0] {
        let on = detect_training_point(&plain, &[a, 2.0], None, DetectMethod::Flipd, &cfg).unwrap();
        assert!(atom > on);
    }
    assert!(detect_training_point(&plain, &[0.0, 0.0], None, DetectMethod::CfgNorm, &cfg).is_err());

    let m = atom_and_blob();
    let c = [1.0, 0.0];
    let x = [1.0, 0.0];
    assert!(detect_training_point(&m, &x, Some(&c), DetectMethod::Flipd, &cfg).is_err());
    assert!(detect_training_point(&m, &x, None, DetectMethod::FlipdCond, &cfg).is_err());

    let zero = DetectConfig {
        k_euler: 0,
        ..cfg.clone()
    };
    let got = detect_training_point(&m, &x, Some(&c), DetectMethod::CfgNorm, &zero).unwrap();
    let sc = m.eval_score(&x, zero.t0, Some(&c)).unwrap();
    let sn = m.eval_score(&x, zero.t0, None).unwrap();
    let want = ((sc[0] - sn[0]).powi(2) + (sc[1] - sn[1]).powi(2)).sqrt();
    assert_eq!(got, want);
    let stepped = detect_training_point(&m, &x, Some(&c), DetectMethod::CfgNorm, &cfg).unwrap();
    assert!(stepped.is_finite() && stepped > 0.0);
}

#[test]
fn attribution_falls_back_to_uniform_when_the_metric_ignores_c() {
    let same = |label| Component::new(0.5, gaussian(vec![0.0, 0.0], 0.5)).with_class(label);
    let spec = ManifoldSpec::new(2, vec![same(0), same(1)]).unwrap();
    let m = ScoreModel::analytic(spec, Schedule::default(), true).unwrap();
    let part = Partition::uniform(2, 1).unwrap();
    let a = token_attribution(&m, &[1.0, 0.0], &part, Metric::ACfg, &metric_cfg(2, 10)).unwrap();
    assert!(a.degenerate);
    assert_eq!(a.weights, vec![0.5, 0.5]);
}

#[test]
fn identical_components_receive_equal_weight() {
    let spec = ManifoldSpec::new(
        2,
        vec![
            Component::new(0.4, point(vec![1.0, 0.0])).with_class(0),
            Component::new(0.3, gaussian(vec![-1.0, 0.5], 0.3)).with_class(1),
            Component::new(0.3, gaussian(vec![-1.0, 0.5], 0.3)).with_class(2),
        ],
    )
    .unwrap();
    let m = ScoreModel::analytic(spec, Schedule::default(), true).unwrap();
    let part = Partition::uniform(3, 1).unwrap();
    for metric in Metric::ALL {
        let a = token_attribution(&m, &[0.5, 0.25, 0.25], &part, metric, &metric_cfg(3, 12)).unwrap();
        assert!(!a.degenerate);
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(
            (a.weights[1] - a.weights[2]).abs() < 1e-9 * a.weights[1].max(1e-300),
            "{metric:?}: {:?}",
            a.weights
        );
    }
}

#[test]
fn mitigation_contract() {
    let m = atom_and_blob();
    let part = Partition::uniform(2, 1).unwrap();
    let cfg = metric_cfg(2, 10);
    let c = [1.0, 0.0];
    let prior = ComponentPrior::StandardNormal;
    let same = mitigate_prompt(
        &m,
        &c,
        &part,
        Metric::ACfg,
        &cfg,
        0,
        MitigationStrategy::Attribution,
        &prior,
        1,
    )
    .unwrap();
    assert_eq!(same.c, c.to_vec());
    assert!(same.selected.is_empty());
    assert!(mitigate_prompt(
        &m,
        &c,
        &part,
        Metric::ACfg,
        &cfg,
        3,
        MitigationStrategy::Random,
        &prior,
        1
    )
    .is_err());

    for strategy in [MitigationStrategy::Attribution, MitigationStrategy::Random] {
        let a = mitigate_prompt(&m, &c, &part, Metric::ACfg, &cfg, 1, strategy, &prior, 5).unwrap();
        let b = mitigate_prompt(&m, &c, &part, Metric::ACfg, &cfg, 1, strategy, &prior, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected.len(), 1);
        let kept = 1 - a.selected[0];
        assert_eq!(a.c[kept], c[kept]);
    }

    let pools = ComponentPrior::Pools {
        pools: vec![vec![vec![7.0]], vec![vec![9.0]]],
    };
    let both = mitigate_prompt(
        &m,
        &c,
        &part,
        Metric::ACfg,
        &cfg,
        2,
        MitigationStrategy::Random,
        &pools,
        2,
    )
    .unwrap();
    assert_eq!(both.c, vec![7.0, 9.0]);
}

#[test]
fn optimization_contract() {
    let m = atom_and_blob();
    let cfg = metric_cfg(2, 10);
    let c0 = [1.0, 0.0];
    let none = optimize_conditioning(&m, &c0, Metric::AFlipd, &cfg, 0, 0.1, 4).unwrap();
    assert_eq!(none.len(), 1);
    assert_eq!(none[0].c, c0.to_vec());
    let direct = accumulate_metric(&m, &c0, Metric::AFlipd, &MetricConfig { seed: 4, ..cfg.clone() }).unwrap();
    assert_eq!(none[0].value, direct.value);

    let frozen = optimize_conditioning(&m, &c0, Metric::AFlipd, &cfg, 3, 0.0, 4).unwrap();
    assert_eq!(frozen.len(), 4);
    assert!(frozen.iter().all(|s| s.value == frozen[0].value && s.c == c0.to_vec()));

    let moved = optimize_conditioning(&m, &c0, Metric::AFlipd, &cfg, 5, 0.05, 4).unwrap();
    assert_eq!(moved.len(), 6);
    assert!(moved.iter().all(|s| s.value.is_finite() && s.std_error.is_finite()));
    assert_ne!(moved[5].c, c0.to_vec());
    assert!(optimize_conditioning(&m, &c0, Metric::AFlipd, &cfg, 1, f64::NAN, 4).is_err());
}
