//! Invariant batteries runnable by name.

use nalgebra::{DMatrix, SymmetricEigen};

use super::config::{ExperimentConfig, OverfitCopySetup, Setup, ZooSetup};
use super::dup::{metric_battery, mitigation_battery, DupFixture};
use super::table::{num, Check, SuiteTable};
use crate::batch::Batch;
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::lid::{decoder_jacobian_lid, flipd, nb_lid, FlipdConfig, LinearGenerator, LpcaIndex, NbConfig};
use crate::manifolds::{sample_manifold, true_lid, Component, ComponentKind, ManifoldSpec};
use crate::memorization::{copy_check, CopyConfig, Metric};
use crate::rng::{self, derive_seed};
use crate::scorenet::ScoreModel;
use crate::stats;

pub const SUITES: [&str; 6] = [
    "duplication",
    "conditioning",
    "copy",
    "estimators",
    "metrics",
    "mitigation",
];

/// Runs the named battery with default settings.
pub fn verify_suite(name: &str, seed: u64) -> Result<SuiteTable> {
    match name {
        "duplication" => duplication_suite(&[10, 50, 100, 500], &[0.05, 0.2], 2000, seed),
        "conditioning" => conditioning_suite(seed),
        "copy" => copy_suite(&OverfitCopySetup::default(), seed),
        "estimators" => estimator_suite(&ZooSetup::default(), seed),
        "metrics" | "mitigation" => {
            let mut cfg = ExperimentConfig::preset("duplicated-class", std::env::temp_dir())?;
            cfg.reseed(seed);
            let fx = DupFixture::build(&cfg)?;
            if name == "metrics" {
                Ok(metric_battery(&fx)?.0)
            } else {
                Ok(mitigation_battery(&fx, &Metric::ALL)?.0)
            }
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown suite `{other}`; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

fn eye(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Probability that at least two of `n` draws land on an atom of weight `w`,
/// summed over the exact binomial counts.
pub fn atom_pair_probability(n: u64, w: f64) -> f64 {
    (2..=n).map(|k| stats::ln_binomial_pmf(n, k, w).exp()).sum()
}

/// Exact duplicates in finite samples arise only from atoms, at the binomial rate.
pub fn duplication_suite(ns: &[usize], weights: &[f64], trials: usize, seed: u64) -> Result<SuiteTable> {
    let mut suite = SuiteTable::new("duplication");
    let atom = vec![3.0, 3.0];
    let blob = ComponentKind::gaussian_from_basis(vec![0.0, 0.0], &eye(2), &[1.0, 1.0]);
    for &w in weights {
        let spec = ManifoldSpec::new(
            2,
            vec![
                Component::new(1.0 - w, blob.clone()),
                Component::new(w, ComponentKind::PointMass { location: atom.clone() }),
            ],
        )?;
        for &n in ns {
            let (mut hits, mut first_at_atom, mut first_dup, mut stray) = (0u64, 0u64, 0u64, 0u64);
            for trial in 0..trials {
                let s = sample_manifold(
                    &spec,
                    n,
                    derive_seed(seed, (n * 1_000_003 + trial) as u64 ^ w.to_bits()),
                )?;
                let on_atom: Vec<bool> = s.points.iter_rows().map(|r| r == atom.as_slice()).collect();
                let k = on_atom.iter().filter(|b| **b).count();
                hits += u64::from(k >= 2);
                if on_atom[0] {
                    first_at_atom += 1;
                    first_dup += u64::from(k >= 2);
                }
                stray += count_duplicate_pairs(&s.points, Some(&atom)) as u64;
            }
            let exact = atom_pair_probability(n as u64, w);
            let (lo, hi) = stats::wilson_interval(hits, trials as u64, 0.99);
            suite.push(Check::new(
                format!("n={n}, w={w}: frequency of a duplicate pair matches the exact binomial probability"),
                format!(
                    "{} (99% CI [{lo:.4}, {hi:.4}]), exact {exact:.4}",
                    num(hits as f64 / trials as f64)
                ),
                "exact inside the 99% Wilson interval",
                lo <= exact && exact <= hi,
            ));
            let bound = 1.0 - (1.0 - w).powi(n as i32 - 1);
            let (blo, bhi) = stats::wilson_interval(first_dup, first_at_atom.max(1), 0.99);
            suite.push(
                Check::new(
                    format!("n={n}, w={w}: an atom draw is duplicated at rate 1-(1-w)^(n-1)"),
                    format!("{first_dup}/{first_at_atom} (99% CI [{blo:.4}, {bhi:.4}]), formula {bound:.4}"),
                    "formula inside the 99% Wilson interval",
                    first_at_atom > 0 && blo <= bound && bound <= bhi,
                )
                .informational(),
            );
            suite.push(Check::new(
                format!("n={n}, w={w}: no exact duplicates away from the atom"),
                stray.to_string(),
                "== 0",
                stray == 0,
            ));
        }
    }
    let smooth = ManifoldSpec::new(2, vec![Component::new(1.0, blob)])?;
    let mut dups = 0;
    for (i, &n) in ns.iter().enumerate() {
        for trial in 0..trials.min(200) {
            let s = sample_manifold(&smooth, n, derive_seed(seed ^ 0x5eed, (i * 100_000 + trial) as u64))?;
            dups += count_duplicate_pairs(&s.points, None);
        }
    }
    suite.push(Check::new(
        "atomless data contains no exact duplicates",
        dups.to_string(),
        "== 0",
        dups == 0,
    ));
    Ok(suite)
}

/// Pairs of bit-identical rows, ignoring rows equal to `skip`.
fn count_duplicate_pairs(points: &Batch, skip: Option<&[f64]>) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter_rows()
        .filter(|r| skip != Some(*r))
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort();
    keys.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Class-mixture specs with separated class supports.
fn conditioning_specs() -> Result<Vec<ManifoldSpec>> {
    let line = |mean: Vec<f64>, dir: Vec<f64>| ComponentKind::gaussian_from_basis(mean, &[dir], &[1.0]);
    let plane = ComponentKind::gaussian_from_basis(vec![0.0, 0.0, 2.0], &eye(3)[..2], &[1.0, 1.0]);
    Ok(vec![
        ManifoldSpec::new(
            2,
            vec![
                Component::new(
                    0.3,
                    ComponentKind::PointMass {
                        location: vec![2.0, 0.0],
                    },
                )
                .with_class(0),
                Component::new(0.4, line(vec![-2.0, 0.0], vec![0.0, 1.0])).with_class(1),
                Component::new(
                    0.3,
                    ComponentKind::gaussian_from_basis(vec![0.0, 4.0], &eye(2), &[0.5, 0.5]),
                )
                .with_class(2),
            ],
        )?,
        ManifoldSpec::new(
            3,
            vec![
                Component::new(0.5, plane).with_class(0),
                Component::new(0.3, line(vec![0.0, 0.0, -2.0], vec![1.0, 0.0, 0.0])).with_class(1),
                Component::new(
                    0.2,
                    ComponentKind::PointMass {
                        location: vec![0.0, 3.0, 0.0],
                    },
                )
                .with_class(1),
            ],
        )?,
    ])
}

/// Conditioning never raises LID: exactly for the oracle, up to 0.2 for FLIPD.
pub fn conditioning_suite(seed: u64) -> Result<SuiteTable> {
    let mut suite = SuiteTable::new("conditioning");
    let cfg = FlipdConfig::with_t0(0.01);
    let (mut checked, mut oracle_violations, mut flipd_violations) = (0usize, 0usize, 0usize);
    let mut worst = f64::NEG_INFINITY;
    for (si, spec) in conditioning_specs()?.into_iter().enumerate() {
        let classes = spec.class_count().unwrap_or(0);
        let model = ScoreModel::analytic(spec.clone(), Schedule::default(), true)?;
        for class in 0..classes {
            let sub = spec.restrict_to_class(class)?;
            let mut onehot = vec![0.0; classes];
            onehot[class] = 1.0;
            let pts = sample_manifold(&sub, 10, derive_seed(seed, (si * 100 + class) as u64))?;
            for x in pts.points.iter_rows() {
                checked += 1;
                let (lc, lu) = (true_lid(&sub, x, 1e-6)?, true_lid(&spec, x, 1e-6)?);
                oracle_violations += usize::from(lc > lu);
                let fc = flipd(&model, x, &cfg, Some(&onehot))?.value;
                let fu = flipd(&model, x, &cfg, None)?.value;
                worst = worst.max(fc - fu);
                flipd_violations += usize::from(fc > fu + 0.2);
            }
        }
    }
    suite.push(Check::new(
        "oracle LID under conditioning never exceeds the unconditional LID",
        format!("{oracle_violations} violations over {checked} support points"),
        "== 0",
        oracle_violations == 0,
    ));
    suite.push(Check::new(
        "conditional FLIPD <= unconditional FLIPD + 0.2",
        format!("{flipd_violations} violations, worst excess {}", num(worst)),
        "== 0",
        flipd_violations == 0,
    ));
    Ok(suite)
}

fn spec_sampler(spec: ManifoldSpec) -> impl Fn(usize, u64) -> Result<Batch> {
    move |n, s| Ok(sample_manifold(&spec, n, s)?.points)
}

/// Overfit kernels are flagged as copies; identical measures and shared atoms are not.
pub fn copy_suite(setup: &OverfitCopySetup, seed: u64) -> Result<SuiteTable> {
    let mut suite = SuiteTable::new("copy");
    let d = setup.ambient_dim;
    let x0 = vec![0.0; d];
    let plane = ComponentKind::gaussian_from_basis(x0.clone(), &eye(d)[..setup.rank], &vec![1.0; setup.rank]);
    let gt = ManifoldSpec::new(d, vec![Component::new(1.0, plane.clone())])?;
    let w = setup.kernel_weight;
    let overfit = ManifoldSpec::new(
        d,
        vec![
            Component::new(1.0 - w, plane.clone()),
            Component::new(
                w,
                ComponentKind::gaussian_from_basis(x0.clone(), &eye(d), &vec![setup.kernel_std; d]),
            ),
        ],
    )?;
    let a = setup.atom_weight;
    let atomic = ManifoldSpec::new(
        d,
        vec![
            Component::new(1.0 - a, plane),
            Component::new(a, ComponentKind::PointMass { location: x0.clone() }),
        ],
    )?;
    let rate = |model: &ManifoldSpec, truth: &ManifoldSpec, n_mc: usize, stream: u64| -> Result<f64> {
        let (ms, gs) = (spec_sampler(model.clone()), spec_sampler(truth.clone()));
        let mut flags = 0;
        for trial in 0..setup.trials {
            let cfg = CopyConfig {
                n_mc,
                seed: derive_seed(seed, stream * 1_000_000 + trial as u64),
                ..setup.copy.clone()
            };
            flags += usize::from(copy_check(&ms, &gs, &x0, &cfg)?.flagged);
        }
        Ok(flags as f64 / setup.trials as f64)
    };
    let n_mc = setup.copy.n_mc;
    let overfit_rate = rate(&overfit, &gt, n_mc, 1)?;
    suite.push(Check::new(
        format!(
            "overfit kernel is flagged as a ({}, {})-copy at n_mc = {n_mc}",
            setup.copy.lambda, setup.copy.gamma
        ),
        format!("flag rate {}", num(overfit_rate)),
        ">= 0.99",
        overfit_rate >= 0.99,
    ));
    let mut grid_rates = Vec::new();
    for (i, &n) in setup.n_mc_grid.iter().enumerate() {
        grid_rates.push(rate(&overfit, &gt, n, 10 + i as u64)?);
    }
    let monotone = grid_rates.windows(2).all(|w| w[0] <= w[1]);
    suite.push(Check::new(
        "overfit flag rate is non-decreasing in n_mc",
        setup
            .n_mc_grid
            .iter()
            .zip(&grid_rates)
            .map(|(n, r)| format!("{n}: {r}"))
            .collect::<Vec<_>>()
            .join(", "),
        "monotone",
        monotone,
    ));
    let same_rate = rate(&gt, &gt, n_mc, 2)?;
    suite.push(Check::new(
        "identical samplers are flagged at most 1% of the time",
        format!("flag rate {}", num(same_rate)),
        "<= 0.01",
        same_rate <= 0.01,
    ));
    let atom_rate = rate(&atomic, &atomic, n_mc, 3)?;
    suite.push(Check::new(
        "a ground-truth atom reproduced exactly is never a copy",
        format!("flag rate {}", num(atom_rate)),
        "== 0",
        atom_rate == 0.0,
    ));
    Ok(suite)
}

/// FLIPD of a single affine Gaussian from the eigendecomposition of its covariance.
pub fn gaussian_flipd_closed_form(mean: &[f64], cov: &[Vec<f64>], x: &[f64], schedule: &Schedule, t0: f64) -> f64 {
    let d = mean.len();
    let (psi, var) = (schedule.psi(t0), schedule.sigma_sq(t0));
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[i][j]));
    let (mut trace, mut norm) = (0.0, 0.0);
    for i in 0..d {
        let lam = eig.eigenvalues[i].max(0.0);
        let u = eig.eigenvectors.column(i);
        let proj: f64 = (0..d).map(|j| u[j] * (x[j] - mean[j])).sum();
        let denom = psi * psi * lam + var;
        trace -= 1.0 / denom;
        norm += (psi * proj / denom).powi(2);
    }
    d as f64 + var * (trace + norm)
}

fn zoo_spec(d: usize, r: usize, seed: u64) -> Result<ManifoldSpec> {
    let mut mean = vec![0.0; d];
    mean[0] = 0.5;
    if r == 0 {
        Ok(ManifoldSpec::point_mass(mean))
    } else {
        ManifoldSpec::linear_gaussian(d, r, mean, seed)
    }
}

/// Every estimator recovers the exact dimension of affine Gaussians and atoms.
pub fn estimator_suite(setup: &ZooSetup, seed: u64) -> Result<SuiteTable> {
    let mut suite = SuiteTable::new("estimators");
    let schedule = Schedule::default();
    for &d in &setup.dims {
        for &r in setup.ranks.iter().filter(|&&r| r <= d) {
            let spec = zoo_spec(d, r, derive_seed(seed, (d * 100 + r) as u64))?;
            let model = ScoreModel::analytic(spec.clone(), schedule, false)?;
            let (mean, cov) = match &spec.components[0].kind {
                ComponentKind::AffineGaussian { mean, covariance, .. } => (mean.clone(), covariance.clone()),
                ComponentKind::PointMass { location } => (location.clone(), vec![vec![0.0; d]; d]),
                ComponentKind::VonMisesCircle { .. } => unreachable!("zoo specs are Gaussian"),
            };
            let pts = sample_manifold(&spec, setup.points, derive_seed(seed, 7 + (d * 100 + r) as u64))?.points;

            let mut rel: f64 = 0.0;
            let mut limit_err: f64 = 0.0;
            let mut nb_wrong = 0;
            for x in pts.iter_rows() {
                let got = flipd(&model, x, &FlipdConfig::with_t0(setup.t0), None)?.value;
                let want = gaussian_flipd_closed_form(&mean, &cov, x, &schedule, setup.t0);
                rel = rel.max((got - want).abs() / want.abs().max(1.0));
                let lim = flipd(&model, x, &FlipdConfig::with_t0(setup.t0_limit), None)?.value;
                limit_err = limit_err.max((lim - r as f64).abs());
                let nb_cfg = NbConfig {
                    seed: derive_seed(seed, 3),
                    ..setup.nb.clone()
                };
                nb_wrong += usize::from(nb_lid(&model, x, &nb_cfg, None)?.value != r as f64);
            }
            suite.push(Check::new(
                format!("d={d}, r={r}: FLIPD at t0={} matches the closed form", setup.t0),
                format!("{rel:e}"),
                "relative error <= 1e-8",
                rel <= 1e-8,
            ));
            suite.push(Check::new(
                format!("d={d}, r={r}: FLIPD at t0={} approaches the true LID", setup.t0_limit),
                format!("{limit_err:e}"),
                format!("<= {:.1}", 0.1 * d as f64),
                limit_err <= 0.1 * d as f64,
            ));
            suite.push(Check::new(
                format!("d={d}, r={r}: NB returns the exact dimension"),
                format!("{nb_wrong} of {} points wrong", setup.points),
                "== 0",
                nb_wrong == 0,
            ));

            let data = sample_manifold(&spec, setup.lpca_samples, derive_seed(seed, 11 + (d * 100 + r) as u64))?.points;
            let index = LpcaIndex::new(data, setup.lpca.clone())?;
            let mut lpca_wrong = 0;
            for x in pts.iter_rows() {
                lpca_wrong += usize::from(index.estimate(x)?.value != r as f64);
            }
            suite.push(Check::new(
                format!("d={d}, r={r}: LPCA returns the exact dimension"),
                format!("{lpca_wrong} of {} points wrong", setup.points),
                "== 0",
                lpca_wrong == 0,
            ));

            let mut gr = rng::rng(derive_seed(seed, 13 + (d * 100 + r) as u64));
            let b = DMatrix::from_fn(d, r, |_, _| rng::standard_normal(&mut gr));
            let c = DMatrix::from_fn(r, d, |_, _| rng::standard_normal(&mut gr));
            let gen = LinearGenerator { a: &b * &c };
            let z = rng::normal_vec(&mut gr, d);
            let jac = decoder_jacobian_lid(&gen, &z, crate::lid::SingularThreshold::Absolute { tau: 1e-8 })?.value;
            suite.push(Check::new(
                format!("d={d}, r={r}: Jacobian rank of a rank-{r} linear generator"),
                num(jac),
                format!("== {r}"),
                jac == r as f64,
            ));
        }
    }
    Ok(suite)
}

/// The battery matching a config's setup, if it has one without training.
pub fn setup_suite(cfg: &ExperimentConfig) -> Result<Option<SuiteTable>> {
    match &cfg.setup {
        Setup::OverfitCopy(o) => copy_suite(o, cfg.eval_seed).map(Some),
        Setup::AnalyticZoo(z) => estimator_suite(z, cfg.eval_seed).map(Some),
        _ => Ok(None),
    }
}
