//! Acceptance criteria 1–8. Runs as a plain binary so that the verdict lines
//! print on every `cargo test`; the headline statistics are recomputed here
//! from artifacts and test-local oracles rather than read off the library's
//! own checks.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use mmhlab_core::lab::{
    atom_pair_probability, conditioning_suite, copy_suite, duplication_suite, estimator_suite, run_experiment, DupData,
    DupFixture, ExperimentConfig, OverfitCopySetup, RunReport, Setup, SuiteTable, ZooSetup,
};
use mmhlab_core::lid::{flipd, FlipdConfig};
use mmhlab_core::manifolds::{sample_manifold, ComponentKind, ManifoldSpec};
use mmhlab_core::memorization::{
    metric_gradient_on_trajectory, metric_on_trajectory, metric_trajectories, Metric, MetricConfig,
};
use mmhlab_core::scorenet::{load_checkpoint, save_checkpoint};
use mmhlab_core::{rng, Schedule, ScoreModel, TraceMode};
use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, StudentsT};

const FLIPD_REL_TOL: f64 = 1e-8;
const FLIPD_LIMIT_T0: f64 = 1e-5;
const FLIPD_LIMIT_FRACTION: f64 = 0.1;
const ESTIMATOR_BUDGET_S: f64 = 120.0;
const VON_MISES_AUC: f64 = 0.9;
const VON_MISES_AUC_SAMPLES: usize = 100;
const VON_MISES_BUDGET_S: f64 = 900.0;
const ISOLATED_RADIUS: f64 = 0.25;
const CONDITIONING_SEEDS: u64 = 3;
const DUPLICATION_NS: [usize; 4] = [10, 50, 100, 500];
const DUPLICATION_WEIGHTS: [f64; 2] = [0.05, 0.2];
const DUPLICATION_TRIALS: usize = 2000;
const COPY_FLAG_RATE: f64 = 0.99;
const COPY_FALSE_POSITIVE: f64 = 0.01;
const METRIC_IDENTITY_TOL: f64 = 1e-10;
const METRIC_AUC: f64 = 0.8;
const CORRELATION_P: f64 = 0.01;
const MITIGATION_P: f64 = 0.05;
const GRADIENT_REL_TOL: f64 = 1e-4;
const HUTCHINSON_SE: f64 = 3.0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Criterion = fn(&Path) -> Result<Outcome, Box<dyn std::error::Error>>;

fn main() {
    // `cargo test -- --list` addresses harness tests; answer politely.
    // Numeric arguments select criteria, e.g. `cargo test --test acceptance -- 3 8`.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let only: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let dir = tempfile::tempdir().expect("temporary directory");
    let criteria: [(&str, Criterion); 8] = [
        ("estimator oracle suite on the analytic zoo", criterion_1),
        ("von Mises reproduction", criterion_2),
        ("conditioning inequality", criterion_3),
        ("duplication suite", criterion_4),
        ("copy verifier", criterion_5),
        ("metric suite on the duplicated-class preset", criterion_6),
        ("mitigation on the duplicated-class preset", criterion_7),
        ("numerical hygiene", criterion_8),
    ];
    let mut lines = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let sub = dir.path().join(format!("c{}", i + 1));
        std::fs::create_dir_all(&sub).expect("criterion directory");
        let o = f(&sub).unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let line = format!(
            "criterion {} [{}] {name}: {} ({:.1}s)",
            i + 1,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        lines.push((o.passed, line));
    }
    println!("\nacceptance summary");
    for (_, line) in &lines {
        println!("  {line}");
    }
    let failed = lines.iter().filter(|(p, _)| !p).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn failing_checks(suites: &[SuiteTable]) -> Vec<String> {
    suites
        .iter()
        .flat_map(|s| s.checks.iter().filter(|c| !c.passed && c.gating))
        .map(|c| format!("{} ({})", c.invariant, c.observed))
        .collect()
}

/// Pairwise AUC of `pos` over `neg`, ties counting one half.
fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn read_csv(path: &Path) -> Result<Vec<HashMap<String, String>>, Box<dyn std::error::Error>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(
            headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect(),
        );
    }
    Ok(rows)
}

fn field(row: &HashMap<String, String>, key: &str) -> Result<f64, Box<dyn std::error::Error>> {
    Ok(row.get(key).ok_or_else(|| format!("missing column {key}"))?.parse()?)
}

/// One-sided paired t-test of mean(a - b) > 0.
fn paired_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return if m > 0.0 { 0.0 } else { 1.0 };
    }
    let t = m / (sd / n.sqrt());
    1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t)
}

/// VP marginal coefficients written out from β(t) = 0.1 + 19.9 t.
fn vp(t: f64) -> (f64, f64) {
    let integral = 0.1 * t + 0.5 * 19.9 * t * t;
    let psi = (-0.5 * integral).exp();
    (psi, 1.0 - psi * psi)
}

/// FLIPD of N(mean, cov) through the inverse of the noised covariance.
fn flipd_by_inverse(mean: &[f64], cov: &[Vec<f64>], x: &[f64], t0: f64) -> f64 {
    let d = mean.len();
    let (psi, var) = vp(t0);
    let noised = DMatrix::from_fn(d, d, |i, j| psi * psi * cov[i][j] + if i == j { var } else { 0.0 });
    let inv = noised.try_inverse().expect("noised covariance is positive definite");
    let centred = DMatrix::from_fn(d, 1, |i, _| psi * x[i] - psi * mean[i]);
    let score = -(&inv * centred);
    d as f64 + var * (-inv.trace() + score.norm_squared())
}

fn criterion_1(_: &Path) -> Result<Outcome, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let zoo = ZooSetup::default();
    let suite = estimator_suite(&zoo, 0)?;
    let failing = failing_checks(std::slice::from_ref(&suite));

    let (mut worst_rel, mut worst_limit, mut members) = (0.0_f64, 0.0_f64, 0);
    let schedule = Schedule::default();
    for &d in &zoo.dims {
        for &r in zoo.ranks.iter().filter(|&&r| r <= d) {
            members += 1;
            let mut mean = vec![0.0; d];
            mean[1] = -0.3;
            let spec = if r == 0 {
                ManifoldSpec::point_mass(mean)
            } else {
                ManifoldSpec::linear_gaussian(d, r, mean, 1000 + (d * 10 + r) as u64)?
            };
            let (mean, cov) = match &spec.components[0].kind {
                ComponentKind::AffineGaussian { mean, covariance, .. } => (mean.clone(), covariance.clone()),
                ComponentKind::PointMass { location } => (location.clone(), vec![vec![0.0; d]; d]),
                ComponentKind::VonMisesCircle { .. } => unreachable!(),
            };
            let model = ScoreModel::analytic(spec.clone(), schedule, false)?;
            for x in sample_manifold(&spec, 4, 77)?.points.iter_rows() {
                let got = flipd(&model, x, &FlipdConfig::with_t0(0.01), None)?.value;
                let want = flipd_by_inverse(&mean, &cov, x, 0.01);
                worst_rel = worst_rel.max((got - want).abs() / want.abs().max(1.0));
                let lim = flipd(&model, x, &FlipdConfig::with_t0(FLIPD_LIMIT_T0), None)?.value;
                worst_limit = worst_limit.max((lim - r as f64).abs() / d as f64);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = failing.is_empty()
        && worst_rel <= FLIPD_REL_TOL
        && worst_limit <= FLIPD_LIMIT_FRACTION
        && secs <= ESTIMATOR_BUDGET_S;
    Ok(outcome(
        passed,
        format!(
            "{members} zoo members; FLIPD vs inverse oracle max rel err {worst_rel:.2e} (<= {FLIPD_REL_TOL:e}); \
             t0 -> 0 limit max |err|/d {worst_limit:.3} (<= {FLIPD_LIMIT_FRACTION}); \
             NB/LPCA/Jacobian suite {} of {} checks failing{}; {secs:.0}s (<= {ESTIMATOR_BUDGET_S}s)",
            failing.len(),
            suite.checks.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(": {}", failing.join("; "))
            },
        ),
    ))
}

/// Region of a von Mises sample by geometry alone: isolated copy, atom at
/// the origin, or the unit circle, whichever support is nearest.
fn von_mises_region(x: &[f64]) -> &'static str {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
    let to_isolated = ((x[0] + 1.0).powi(2) + x[1].powi(2)).sqrt();
    if to_isolated <= ISOLATED_RADIUS {
        "isolated"
    } else if r < (r - 1.0).abs() {
        "atom"
    } else {
        "circle"
    }
}

fn criterion_2(dir: &Path) -> Result<Outcome, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let cfg = ExperimentConfig::preset("von-mises", dir)?;
    let Setup::Manifold(m) = &cfg.setup else { unreachable!() };
    if m.isolated != vec![vec![-1.0, 0.0]] || m.n_train + m.isolated.len() != 100 {
        return Ok(outcome(
            false,
            "preset does not train on 100 points with one isolated point at (-1, 0)",
        ));
    }
    let report = run_experiment(&cfg)?;
    let secs = start.elapsed().as_secs_f64();

    let lid = read_csv(&dir.join("lid.csv"))?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for row in lid.iter().take(VON_MISES_AUC_SAMPLES) {
        let x = [field(row, "x0")?, field(row, "x1")?];
        let score = -field(row, "flipd")?;
        if von_mises_region(&x) == "circle" {
            neg.push(score);
        } else {
            pos.push(score);
        }
    }
    let auc = if pos.is_empty() || neg.is_empty() {
        f64::NAN
    } else {
        brute_auc(&pos, &neg)
    };

    let mem = read_csv(&dir.join("memorization.csv"))?;
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (row, l) in mem.iter().zip(&lid) {
        if row["label"] == "not" {
            continue;
        }
        let region = von_mises_region(&[field(l, "x0")?, field(l, "x1")?]);
        let want = match region {
            "isolated" => "od_mem",
            "atom" => "dd_mem",
            _ => continue,
        };
        let e = counts.entry(region).or_default();
        e.1 += 1;
        e.0 += usize::from(row["mem_type"] == want);
    }
    let (iso, atom) = (
        counts.get("isolated").copied().unwrap_or_default(),
        counts.get("atom").copied().unwrap_or_default(),
    );
    let majority = |(hits, n): (usize, usize)| n > 0 && 2 * hits > n;
    let passed =
        auc >= VON_MISES_AUC && majority(iso) && majority(atom) && report.passed() && secs <= VON_MISES_BUDGET_S;
    Ok(outcome(
        passed,
        format!(
            "AUC {auc:.4} over the first {VON_MISES_AUC_SAMPLES} samples ({} memorized-region, {} circle; need >= {VON_MISES_AUC}); \
             isolated od_mem {}/{}, atom dd_mem {}/{} (need majorities); pipeline report {}; {secs:.0}s (<= {VON_MISES_BUDGET_S}s)",
            pos.len(),
            neg.len(),
            iso.0,
            iso.1,
            atom.0,
            atom.1,
            if report.passed() { "pass" } else { "fail" },
        ),
    ))
}

fn criterion_3(_: &Path) -> Result<Outcome, Box<dyn std::error::Error>> {
    let suites: Vec<SuiteTable> = (0..CONDITIONING_SEEDS)
        .map(conditioning_suite)
        .collect::<Result<_, _>>()?;
    let failing = failing_checks(&suites);
    let observed: Vec<String> = suites
        .iter()
        .flat_map(|s| s.checks.iter().map(|c| c.observed.clone()))
        .collect();
    Ok(outcome(
        failing.is_empty(),
        format!("{CONDITIONING_SEEDS} seeds: {}", observed.join("; ")),
    ))
}

fn criterion_4(_: &Path) -> Result<Outcome, Box<dyn std::error::Error>> {
    // P(at least two of n draws hit the atom) by the complement of zero or one hit.
    let mut worst: f64 = 0.0;
    for &n in &DUPLICATION_NS {
        for &w in &DUPLICATION_WEIGHTS {
            let nf = n as f64;
            let want = 1.0 - (1.0 - w).powf(nf) - nf * w * (1.0 - w).powf(nf - 1.0);
            worst = worst.max((atom_pair_probability(n as u64, w) - want).abs());
        }
    }
    let suite = duplication_suite(&DUPLICATION_NS, &DUPLICATION_WEIGHTS, DUPLICATION_TRIALS, 0)?;
    let failing = failing_checks(std::slice::from_ref(&suite));
    let gating = suite.checks.iter().filter(|c| c.gating).count();
    Ok(outcome(
        failing.is_empty() && worst <= 1e-12,
        format!(
            "binomial probability vs complement oracle max |err| {worst:.1e}; {} of {gating} gating checks pass \
             (99% Wilson intervals, {DUPLICATION_TRIALS} trials per cell, zero duplicates without an atom){}",
            gating - failing.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(": {}", failing.join("; "))
            },
        ),
    ))
}

fn criterion_5(_: &Path) -> Result<Outcome, Box<dyn std::error::Error>> {
    let setup = OverfitCopySetup::default();
    if setup.copy.n_mc != 100_000 || setup.trials != 100 || setup.copy.lambda != 2.0 || setup.copy.gamma != 0.1 {
        return Ok(outcome(
            false,
            "copy preset is not (2, 0.1) at n_mc = 1e5 over 100 trials",
        ));
    }
    let suite = copy_suite(&setup, 0)?;
    let rate = |needle: &str| -> f64 {
        suite
            .checks
            .iter()
            .find(|c| c.invariant.contains(needle))
            .and_then(|c| c.observed.trim_start_matches("flag rate ").parse().ok())
            .unwrap_or(f64::NAN)
    };
    let (overfit, same, atom) = (rate("overfit kernel"), rate("identical samplers"), rate("atom"));
    let passed = overfit >= COPY_FLAG_RATE && same <= COPY_FALSE_POSITIVE && atom == 0.0 && suite.passed();
    Ok(outcome(
        passed,
        format!(
            "overfit flag rate {overfit} (>= {COPY_FLAG_RATE}); identical-sampler rate {same} (<= {COPY_FALSE_POSITIVE}); \
             atom rate {atom} (== 0); all suite checks {}",
            if suite.passed() { "pass" } else { "do not pass" }
        ),
    ))
}

/// Runs the duplicated-class pipeline once; criteria 6 and 7 read its artifacts.
fn duplicated_run(dir: &Path) -> Result<&'static RunReport, Box<dyn std::error::Error>> {
    static RUN: std::sync::OnceLock<Result<RunReport, String>> = std::sync::OnceLock::new();
    let out = dir.parent().unwrap_or(dir).join("duplicated");
    let res = RUN.get_or_init(|| {
        let cfg = ExperimentConfig::preset("duplicated-class", &out).map_err(|e| e.to_string())?;
        run_experiment(&cfg).map_err(|e| e.to_string())
    });
    res.as_ref().map_err(|e| e.clone().into())
}

fn suite_check(report: &RunReport, suite: &str, needle: &str) -> Option<(bool, String)> {
    report
        .suites
        .iter()
        .filter(|s| s.suite == suite)
        .flat_map(|s| &s.checks)
        .find(|c| c.invariant.contains(needle))
        .map(|c| (c.passed, c.observed.clone()))
}

fn criterion_6(dir: &Path) -> Result<Outcome, Box<dyn std::error::Error>> {
    let report = duplicated_run(dir)?;
    let out = dir.parent().unwrap_or(dir).join("duplicated");
    let (null_ok, null_obs) = suite_check(report, "metrics", "null condition").ok_or("missing null-condition check")?;
    let (_, ident_obs) = suite_check(report, "metrics", "A_FLIPD = d").ok_or("missing identity check")?;
    let ident: f64 = ident_obs.parse()?;

    let rows = read_csv(&out.join("metrics.csv"))?;
    let mut aucs = Vec::new();
    for (name, sign) in [("a_cfg", 1.0), ("a_scfg", 1.0), ("a_flipd", -1.0)] {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for r in &rows {
            let v = sign * field(r, name)?;
            if r["memorized"] == "true" {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
        aucs.push((name, brute_auc(&pos, &neg)));
    }
    let repeats = rows
        .iter()
        .map(|r| r["repeat"].clone())
        .collect::<std::collections::BTreeSet<_>>()
        .len();

    let norms = read_csv(&out.join("norms.csv"))?;
    let xs: Vec<f64> = norms
        .iter()
        .map(|r| field(r, "cfg_vector_norm"))
        .collect::<Result<_, _>>()?;
    let ys: Vec<f64> = norms
        .iter()
        .map(|r| field(r, "cfg_adjusted_norm"))
        .collect::<Result<_, _>>()?;
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r = sxy / (sxx * syy).sqrt();
    let t = r * ((n - 2.0) / (1.0 - r * r)).sqrt();
    let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, n - 2.0)?.cdf(t.abs()));

    let passed = null_ok
        && ident <= METRIC_IDENTITY_TOL
        && repeats >= 20
        && aucs.iter().all(|(_, a)| *a >= METRIC_AUC)
        && r > 0.0
        && p < CORRELATION_P;
    Ok(outcome(
        passed,
        format!(
            "A_CFG(null) {null_obs}; identity residual {ident:.1e} (<= {METRIC_IDENTITY_TOL:e}); AUC over {repeats} seeds {} \
             (>= {METRIC_AUC}); norm correlation r = {r:.3}, p = {p:.1e} (< {CORRELATION_P})",
            aucs.iter().map(|(m, a)| format!("{m} {a:.3}")).collect::<Vec<_>>().join(", "),
        ),
    ))
}

fn criterion_7(dir: &Path) -> Result<Outcome, Box<dyn std::error::Error>> {
    duplicated_run(dir)?;
    let out = dir.parent().unwrap_or(dir).join("duplicated");
    let rows = read_csv(&out.join("mitigation.csv"))?;
    // (metric, k) -> (baseline, attribution, random) ratios per seed.
    type Ratios = (Vec<f64>, Vec<f64>, Vec<f64>);
    let mut cells: std::collections::BTreeMap<(String, u32), Ratios> = Default::default();
    for r in &rows {
        let e = cells.entry((r["metric"].clone(), r["k"].parse()?)).or_default();
        e.0.push(field(r, "baseline_ratio")?);
        e.1.push(field(r, "attribution_ratio")?);
        e.2.push(field(r, "random_ratio")?);
    }
    let mut parts = Vec::new();
    let mut passed = cells.len() == 12;
    for ((metric, k), (base, att, rnd)) in &cells {
        let gain = att.iter().sum::<f64>() / att.len() as f64 - base.iter().sum::<f64>() / base.len() as f64;
        let (p_base, p_rnd) = (paired_p(att, base), paired_p(att, rnd));
        let ok = att.len() >= 20 && gain > 0.0 && p_base < MITIGATION_P && p_rnd < MITIGATION_P;
        passed &= ok;
        parts.push(format!(
            "{metric} k={k} {}: p_base {p_base:.1e}, p_random {p_rnd:.1e}",
            if ok { "ok" } else { "FAIL" }
        ));
    }
    Ok(outcome(
        passed,
        format!(
            "paired one-sided t over 20 seeds, need p < {MITIGATION_P}: {}",
            parts.join("; ")
        ),
    ))
}

/// A small but complete duplicated-class run.
fn small_duplicated(out: &Path) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::preset("duplicated-class", out)?;
    cfg.train.steps = 400;
    cfg.train.hidden = vec![32, 32];
    cfg.metrics.n = 4;
    cfg.metrics.steps = 10;
    if let Setup::DuplicatedClass(s) = &mut cfg.setup {
        s.rows_per_class = 20;
        s.eval_repeats = 3;
        s.mitigation_k = vec![1, 2];
        s.mitigation_samples = 4;
        s.mitigation_draws = 1;
        s.optimize_steps = 2;
    }
    cfg.reseed(9);
    Ok(cfg)
}

fn small_von_mises(out: &Path) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::preset("von-mises", out)?;
    cfg.train.steps = 300;
    cfg.train.hidden = vec![32, 32];
    cfg.sampler.n = 40;
    cfg.sampler.steps = 20;
    cfg.reseed(9);
    Ok(cfg)
}

/// Every artifact except the config and report is byte-identical; the
/// reports agree up to timings (the configs differ only in `out_dir`).
fn same_run(a: &Path, b: &Path) -> Result<bool, Box<dyn std::error::Error>> {
    let mut names: Vec<_> = std::fs::read_dir(a)?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<Result<_, _>>()?;
    names.sort();
    for name in &names {
        if name == "report.json" || name == "config.json" {
            continue;
        }
        if std::fs::read(a.join(name))? != std::fs::read(b.join(name))? {
            return Ok(false);
        }
    }
    let strip = |p: &Path| -> Result<RunReport, Box<dyn std::error::Error>> {
        let mut r = RunReport::load(&p.join("report.json"))?;
        r.created_unix = 0;
        for s in &mut r.stages {
            s.seconds = 0.0;
        }
        Ok(r)
    };
    Ok(names.len() > 3 && strip(a)? == strip(b)?)
}

fn criterion_8(dir: &Path) -> Result<Outcome, Box<dyn std::error::Error>> {
    let mut deterministic = true;
    for (name, make) in [
        ("duplicated", small_duplicated as fn(&Path) -> _),
        ("von-mises", small_von_mises),
    ] {
        let (a, b) = (dir.join(format!("{name}-a")), dir.join(format!("{name}-b")));
        run_experiment(&make(&a)?)?;
        run_experiment(&make(&b)?)?;
        deterministic &= same_run(&a, &b)?;
    }

    let run = dir.join("duplicated-a");
    let cfg = small_duplicated(&run)?;
    let model = load_checkpoint(&run.join("model.ckpt"))?;
    let Setup::DuplicatedClass(setup) = &cfg.setup else {
        unreachable!()
    };
    let data = DupData::generate(setup, cfg.data_seed)?;
    let fx = DupFixture::from_model(&cfg, data, model.clone(), Vec::new())?;
    let c = fx.prompt(fx.memorized_class(), 5);

    // Conditioning gradients against central differences on fixed trajectories.
    let mcfg = MetricConfig {
        n: 2,
        steps: 12,
        lambda: 2.0,
        seed: 3,
        ..MetricConfig::default()
    };
    let traj = metric_trajectories(&model, &c, &mcfg)?;
    let h = 1e-5;
    let mut worst_grad: f64 = 0.0;
    for metric in Metric::ALL {
        let (_, grad) = metric_gradient_on_trajectory(&model, &c, &traj, metric, &mcfg)?;
        for j in [0, 1, 5, 17, c.len() - 1] {
            let (mut up, mut dn) = (c.clone(), c.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (metric_on_trajectory(&model, &up, &traj, metric, &mcfg)?.value
                - metric_on_trajectory(&model, &dn, &traj, metric, &mcfg)?.value)
                / (2.0 * h);
            worst_grad = worst_grad.max((grad[j] - fd).abs() / fd.abs().max(1e-6));
        }
    }

    // Hutchinson divergence: single-probe estimates average to the exact trace.
    let mut r = rng::rng(21);
    let mut worst_z: f64 = 0.0;
    for _ in 0..3 {
        let x = rng::normal_vec(&mut r, model.ambient_dim());
        let t = 0.05 + 0.5 * rng::uniform(&mut r);
        let exact = model.score_divergence(&x, t, Some(&c), TraceMode::Exact)?;
        let draws: Vec<f64> = (0..2000)
            .map(|s| model.score_divergence(&x, t, Some(&c), TraceMode::Hutchinson { probes: 1, seed: s }))
            .collect::<Result<_, _>>()?;
        let n = draws.len() as f64;
        let m = draws.iter().sum::<f64>() / n;
        let se = (draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        worst_z = worst_z.max((m - exact).abs() / se);
    }

    // Checkpoint round trip: identical bytes and bit-identical scores.
    let copy = dir.join("copy.ckpt");
    save_checkpoint(&model, &copy)?;
    let back = load_checkpoint(&copy)?;
    let mut bit_exact = std::fs::read(&copy)? == std::fs::read(run.join("model.ckpt"))?;
    for _ in 0..50 {
        let x = rng::normal_vec(&mut r, model.ambient_dim());
        let t = rng::uniform(&mut r).max(1e-3);
        let a = model.eval_score(&x, t, Some(&c))?;
        let b = back.eval_score(&x, t, Some(&c))?;
        bit_exact &= a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits());
    }

    let passed = deterministic && worst_grad <= GRADIENT_REL_TOL && worst_z <= HUTCHINSON_SE && bit_exact;
    Ok(outcome(
        passed,
        format!(
            "gradient vs central differences max rel err {worst_grad:.1e} (<= {GRADIENT_REL_TOL:e}); \
             Hutchinson bias max {worst_z:.2} SE (<= {HUTCHINSON_SE}); checkpoint round trip {}; \
             repeated pipelines {}",
            if bit_exact { "bit-exact" } else { "differs" },
            if deterministic { "identical" } else { "differ" },
        ),
    ))
}
