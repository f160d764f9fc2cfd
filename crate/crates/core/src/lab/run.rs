//! Full pipelines with per-stage artifacts and a JSON report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ManifoldSetup, OverfitCopySetup, Setup, ZooSetup, CONFIG_SCHEMA_VERSION};
use super::dup::{metric_battery, mitigation_battery, DupData, DupFixture};
use super::suites::{copy_suite, estimator_suite};
use super::table::{num, Check, CsvTable, SuiteTable};
use crate::batch::Batch;
use crate::diffusion::sample_reverse;
use crate::error::{Error, Result};
use crate::lid::{flipd, LidEstimate};
use crate::manifolds::{sample_manifold, ComponentKind, ManifoldSpec, DEFAULT_SUPPORT_TOL};
use crate::memorization::{copy_check, label_and_classify, GroundTruth, MemLabel, MemType, TrainIndex};
use crate::scorenet::{save_checkpoint, train_score_model_logged};
use crate::stats;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub experiment: String,
    pub setup: String,
    pub config_hash: String,
    /// Seconds since the Unix epoch when the run started.
    pub created_unix: u64,
    pub stages: Vec<StageRecord>,
    /// Headline statistics such as `auc`; undefined ones are left out.
    pub summary: BTreeMap<String, f64>,
    pub suites: Vec<SuiteTable>,
    pub completed: bool,
    pub error: Option<String>,
}

impl RunReport {
    /// Completed with every gating check passing.
    pub fn passed(&self) -> bool {
        self.completed && self.suites.iter().all(SuiteTable::passed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "experiment {} ({}), config {}\n",
            self.experiment,
            self.setup,
            &self.config_hash[..12.min(self.config_hash.len())]
        );
        for s in &self.stages {
            out += &format!(
                "  stage {:<14} {:>9.2}s  {}\n",
                s.name,
                s.seconds,
                s.artifacts.join(", ")
            );
        }
        for (k, v) in &self.summary {
            out += &format!("  {k} = {v}\n");
        }
        for s in &self.suites {
            out += &s.render();
        }
        match &self.error {
            Some(e) => out += &format!("FAILED: {e}\n"),
            None if !self.completed => out += "INCOMPLETE\n",
            None => out += &format!("{}\n", if self.passed() { "PASS" } else { "FAIL" }),
        }
        out
    }
}

struct Runner {
    dir: PathBuf,
    report: RunReport,
}

impl Runner {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<(T, Vec<PathBuf>)>) -> Result<T> {
        log::info!("stage {name}");
        let start = Instant::now();
        match f(&self.dir) {
            Ok((value, paths)) => {
                let artifacts = paths
                    .iter()
                    .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string())
                    .collect();
                self.report.stages.push(StageRecord {
                    name: name.into(),
                    seconds: start.elapsed().as_secs_f64(),
                    artifacts,
                });
                self.report.save(&self.dir.join(REPORT_FILE))?;
                Ok(value)
            }
            Err(e) => {
                self.report.error = Some(format!("stage {name}: {e}"));
                self.report.save(&self.dir.join(REPORT_FILE))?;
                Err(e)
            }
        }
    }
}

/// Runs every stage of `cfg`, writing artifacts and `report.json` under its
/// output directory. A failing stage leaves a partial report behind.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut runner = Runner {
        report: RunReport {
            schema: CONFIG_SCHEMA_VERSION,
            experiment: cfg.experiment.clone(),
            setup: cfg.setup.name().into(),
            config_hash: cfg.hash()?,
            created_unix,
            stages: Vec::new(),
            summary: BTreeMap::new(),
            suites: Vec::new(),
            completed: false,
            error: None,
        },
        dir: dir.clone(),
    };
    cfg.save(&dir.join("config.json"))?;
    match &cfg.setup {
        Setup::Manifold(m) => run_manifold(&mut runner, cfg, m)?,
        Setup::DuplicatedClass(_) => run_duplicated(&mut runner, cfg)?,
        Setup::OverfitCopy(o) => run_copy(&mut runner, cfg, o)?,
        Setup::AnalyticZoo(z) => run_zoo(&mut runner, cfg, z)?,
    }
    runner.report.completed = true;
    runner.report.save(&dir.join(REPORT_FILE))?;
    Ok(runner.report)
}

fn point_columns(d: usize) -> Vec<(String, String)> {
    (0..d).map(|j| (format!("x{j}"), format!("coordinate {j}"))).collect()
}

fn row_cells(x: &[f64]) -> Vec<String> {
    x.iter().map(|v| num(*v)).collect()
}

/// Per-step loss means over windows of `every` steps.
fn loss_table(losses: &[f64], every: usize) -> CsvTable {
    let mut t = CsvTable::new([
        ("step", "last training step of the window"),
        ("loss", "mean minibatch denoising loss over the window"),
    ]);
    for (i, w) in losses.chunks(every).enumerate() {
        t.push(vec![(i * every + w.len()).to_string(), num(stats::mean(w))]);
    }
    t
}

/// Ground-truth region of `x`: an isolated training point within `radius`,
/// otherwise the nearest component (an atom when it has dimension 0).
pub fn region_of(spec: &ManifoldSpec, isolated: &[Vec<f64>], radius: f64, x: &[f64]) -> Result<String> {
    for (i, p) in isolated.iter().enumerate() {
        let dist = p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist <= radius {
            return Ok(format!("isolated{i}"));
        }
    }
    let dists = spec.support_distances(x)?;
    let nearest = (0..dists.len())
        .min_by(|&i, &j| dists[i].total_cmp(&dists[j]))
        .unwrap_or(0);
    Ok(match spec.components[nearest].kind {
        ComponentKind::PointMass { .. } => format!("atom{nearest}"),
        _ => format!("component{nearest}"),
    })
}

fn is_memorized_region(region: &str) -> bool {
    region.starts_with("atom") || region.starts_with("isolated")
}

fn run_manifold(runner: &mut Runner, cfg: &ExperimentConfig, m: &ManifoldSetup) -> Result<()> {
    let spec = m.spec.resolve()?;
    let d = spec.ambient_dim;

    let train = runner.stage("synth", |dir| {
        let drawn = sample_manifold(&spec, m.n_train, cfg.data_seed)?;
        let mut points = drawn.points;
        for p in &m.isolated {
            points.push_row(p)?;
        }
        let mut cols = point_columns(d);
        cols.push((
            "source".into(),
            "component index, or `isolated<i>` for appended points".into(),
        ));
        let mut t = CsvTable::new(cols);
        for (i, x) in points.iter_rows().enumerate() {
            let mut row = row_cells(x);
            row.push(
                drawn
                    .component_ids
                    .get(i)
                    .map_or_else(|| format!("isolated{}", i - m.n_train), |c| c.to_string()),
            );
            t.push(row);
        }
        Ok((points, vec![t.write(dir, "train")?]))
    })?;

    let model = runner.stage("train", |dir| {
        let out = train_score_model_logged(&train, cfg.schedule, None, &cfg.train)?;
        let ckpt = dir.join("model.ckpt");
        save_checkpoint(&out.model, &ckpt)?;
        let losses = loss_table(&out.losses, 100).write(dir, "losses")?;
        Ok((out.model, vec![ckpt, losses]))
    })?;

    let samples = runner.stage("sample", |dir| {
        let xs = sample_reverse(&model, &cfg.sampler, None, None)?.samples;
        let mut t = CsvTable::new(point_columns(d));
        for x in xs.iter_rows() {
            t.push(row_cells(x));
        }
        Ok((xs, vec![t.write(dir, "samples")?]))
    })?;

    let (lids, regions) = runner.stage("lid", |dir| {
        let mut lids = Vec::with_capacity(samples.rows());
        let mut regions = Vec::with_capacity(samples.rows());
        let mut cols = vec![("sample".to_string(), "row of samples.csv".to_string())];
        cols.extend(point_columns(d));
        cols.push(("flipd".into(), "FLIPD estimate of the model LID".into()));
        cols.push((
            "region".into(),
            "ground-truth region: atom<i>, isolated<i> or component<i>".into(),
        ));
        let mut t = CsvTable::new(cols);
        for (i, x) in samples.iter_rows().enumerate() {
            let est = flipd(&model, x, &cfg.flipd, None)?;
            let region = region_of(&spec, &m.isolated, m.isolated_radius, x)?;
            let mut row = vec![i.to_string()];
            row.extend(row_cells(x));
            row.push(num(est.value));
            row.push(region.clone());
            t.push(row);
            lids.push(est);
            regions.push(region);
        }
        Ok(((lids, regions), vec![t.write(dir, "lid")?]))
    })?;

    let records = runner.stage("detect", |dir| {
        let index = TrainIndex::deduplicated(&train, m.calib_k)?;
        let gt = GroundTruth::Oracle {
            spec: &spec,
            tol: DEFAULT_SUPPORT_TOL,
        };
        let recs = label_and_classify(&samples, &index, Some(gt), &lids, &cfg.thresholds)?;
        let hash = cfg.hash()?;
        let mut t = CsvTable::new([
            ("point_id", "row of samples.csv"),
            ("method", "LID estimator used for the model LID"),
            ("score", "model LID estimate"),
            ("label", "memorization label: not, exact or near"),
            ("mem_type", "none, od_mem, dd_mem or unresolved"),
            ("l2_distance", "distance to the nearest distinct training point"),
            ("calibrated_ratio", "distance over the local training-set scale"),
            ("lid_gt", "ground-truth LID at the nearest training point"),
            ("region", "ground-truth region of the sample"),
            ("config_hash", "hash of the experiment config"),
        ]);
        for (i, r) in recs.iter().enumerate() {
            t.push(vec![
                i.to_string(),
                "flipd".into(),
                num(r.lid_model.value),
                r.label.name().into(),
                r.mem_type.name().into(),
                num(r.l2_distance),
                num(r.calibrated_ratio),
                r.lid_gt.map_or_else(String::new, num),
                regions[i].clone(),
                hash.clone(),
            ]);
        }
        Ok((recs, vec![t.write(dir, "memorization")?]))
    })?;

    let (suite, summary) = runner.stage("report", |dir| {
        let n_auc = m.auc_samples.min(samples.rows());
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for i in 0..n_auc {
            // Low FLIPD flags memorization.
            let s = -lids[i].value;
            if is_memorized_region(&regions[i]) {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        let auc = stats::auc(&pos, &neg);
        let roc = roc_table(&pos, &neg).write(dir, "roc")?;
        let hist = flipd_histogram(&lids, &regions, 0.1).write(dir, "flipd_hist")?;

        let mut suite = SuiteTable::new("von-mises");
        suite.push(Check::new(
            format!(
                "FLIPD separates atom and isolated-copy samples from the rest over the first {n_auc} samples (AUC)"
            ),
            auc.map_or_else(
                || format!("undefined ({} memorized, {} other)", pos.len(), neg.len()),
                num,
            ),
            format!(">= {}", m.auc_min),
            auc.is_some_and(|a| a >= m.auc_min),
        ));
        let mut summary = BTreeMap::new();
        if let Some(a) = auc {
            summary.insert("auc".to_string(), a);
        }
        summary.insert("auc_positives".to_string(), pos.len() as f64);
        summary.insert("auc_negatives".to_string(), neg.len() as f64);
        for (prefix, want) in [("isolated", MemType::OdMem), ("atom", MemType::DdMem)] {
            let types: Vec<MemType> = records
                .iter()
                .zip(&regions)
                .filter(|(r, g)| g.starts_with(prefix) && r.label != MemLabel::Not)
                .map(|(r, _)| r.mem_type)
                .collect();
            let hits = types.iter().filter(|t| **t == want).count();
            summary.insert(format!("{prefix}_memorized"), types.len() as f64);
            summary.insert(format!("{prefix}_{}", want.name()), hits as f64);
            suite.push(Check::new(
                format!("memorized {prefix} samples are classified {}", want.name()),
                format!("{hits}/{}", types.len()),
                "non-empty majority",
                !types.is_empty() && 2 * hits > types.len(),
            ));
        }
        Ok(((suite, summary), vec![roc, hist]))
    })?;
    runner.report.summary.extend(summary);
    runner.report.suites.push(suite);
    Ok(())
}

/// ROC points of `score > threshold` for every distinct threshold.
fn roc_table(pos: &[f64], neg: &[f64]) -> CsvTable {
    let mut t = CsvTable::new([
        (
            "threshold",
            "negated FLIPD cutoff; samples scoring at or above it are flagged",
        ),
        ("tpr", "fraction of memorized-region samples flagged"),
        ("fpr", "fraction of other samples flagged"),
    ]);
    let mut cuts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    t.push(vec!["inf".into(), "0".into(), "0".into()]);
    let rate = |v: &[f64], c: f64| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().filter(|s| **s >= c).count() as f64 / v.len() as f64
        }
    };
    for c in cuts {
        t.push(vec![num(c), num(rate(pos, c)), num(rate(neg, c))]);
    }
    t
}

/// Counts of FLIPD values per region in bins of `width`.
fn flipd_histogram(lids: &[LidEstimate], regions: &[String], width: f64) -> CsvTable {
    let mut counts: BTreeMap<(String, i64), usize> = BTreeMap::new();
    for (l, r) in lids.iter().zip(regions) {
        *counts.entry((r.clone(), (l.value / width).floor() as i64)).or_default() += 1;
    }
    let mut t = CsvTable::new([
        ("region", "ground-truth region"),
        ("bin_lo", "inclusive lower edge of the FLIPD bin"),
        ("bin_hi", "exclusive upper edge of the FLIPD bin"),
        ("count", "samples in the bin"),
    ]);
    for ((r, b), c) in counts {
        t.push(vec![
            r,
            num(b as f64 * width),
            num((b + 1) as f64 * width),
            c.to_string(),
        ]);
    }
    t
}

fn run_duplicated(runner: &mut Runner, cfg: &ExperimentConfig) -> Result<()> {
    let Setup::DuplicatedClass(setup) = &cfg.setup else {
        unreachable!("dispatched on setup")
    };
    let data = runner.stage("synth", |dir| {
        let data = DupData::generate(setup, cfg.data_seed)?;
        let mut cols = point_columns(data.points.dim());
        cols.push((
            "class".into(),
            "class index; the last class holds the duplicated point".into(),
        ));
        let mut t = CsvTable::new(cols);
        for (x, c) in data.points.iter_rows().zip(&data.classes) {
            let mut row = row_cells(x);
            row.push(c.to_string());
            t.push(row);
        }
        Ok((data, vec![t.write(dir, "train")?]))
    })?;
    let fx = runner.stage("train", |dir| {
        let out = train_score_model_logged(&data.points, cfg.schedule, Some(&data.cond), &cfg.train)?;
        let ckpt = dir.join("model.ckpt");
        save_checkpoint(&out.model, &ckpt)?;
        let losses = loss_table(&out.losses, 100).write(dir, "losses")?;
        let fx = DupFixture::from_model(cfg, data.clone(), out.model, out.losses)?;
        Ok((fx, vec![ckpt, losses]))
    })?;
    let metrics = runner.stage("metrics", |dir| {
        let (suite, values, norms) = metric_battery(&fx)?;
        Ok((suite, vec![values.write(dir, "metrics")?, norms.write(dir, "norms")?]))
    })?;
    runner.report.suites.push(metrics);
    let mitigation = runner.stage("mitigation", |dir| {
        let (suite, rows) = mitigation_battery(&fx, &crate::memorization::Metric::ALL)?;
        Ok((suite, vec![rows.write(dir, "mitigation")?]))
    })?;
    runner.report.suites.push(mitigation);
    Ok(())
}

fn run_copy(runner: &mut Runner, cfg: &ExperimentConfig, o: &OverfitCopySetup) -> Result<()> {
    let suite = runner.stage("copy", |dir| {
        let suite = copy_suite(o, cfg.eval_seed)?;
        let verdict = example_verdict(o, cfg.eval_seed)?;
        let path = dir.join("copy_verdict.json");
        fs::write(&path, serde_json::to_string_pretty(&verdict)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok((suite, vec![path]))
    })?;
    runner.report.suites.push(suite);
    Ok(())
}

/// One full per-radius verdict for the overfit kernel at the origin.
fn example_verdict(o: &OverfitCopySetup, seed: u64) -> Result<crate::memorization::CopyVerdict> {
    let d = o.ambient_dim;
    let basis: Vec<Vec<f64>> = (0..o.rank)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let plane = ComponentKind::gaussian_from_basis(vec![0.0; d], &basis, &vec![1.0; o.rank]);
    let gt = ManifoldSpec::new(d, vec![crate::manifolds::Component::new(1.0, plane.clone())])?;
    let eye: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let kernel = ComponentKind::gaussian_from_basis(vec![0.0; d], &eye, &vec![o.kernel_std; d]);
    let model = ManifoldSpec::new(
        d,
        vec![
            crate::manifolds::Component::new(1.0 - o.kernel_weight, plane),
            crate::manifolds::Component::new(o.kernel_weight, kernel),
        ],
    )?;
    let ms = |n: usize, s: u64| -> Result<Batch> { Ok(sample_manifold(&model, n, s)?.points) };
    let gs = |n: usize, s: u64| -> Result<Batch> { Ok(sample_manifold(&gt, n, s)?.points) };
    let cfg = crate::memorization::CopyConfig { seed, ..o.copy.clone() };
    copy_check(&ms, &gs, &vec![0.0; d], &cfg)
}

fn run_zoo(runner: &mut Runner, cfg: &ExperimentConfig, z: &ZooSetup) -> Result<()> {
    let suite = runner.stage("estimators", |dir| {
        let suite = estimator_suite(z, cfg.eval_seed)?;
        let mut t = CsvTable::new([
            ("invariant", "estimator property tested"),
            ("observed", "observed statistic"),
            ("threshold", "pass condition"),
            ("passed", "verdict"),
        ]);
        for c in &suite.checks {
            t.push(vec![
                c.invariant.clone(),
                c.observed.clone(),
                c.threshold.clone(),
                c.passed.to_string(),
            ]);
        }
        Ok((suite, vec![t.write(dir, "estimators")?]))
    })?;
    runner.report.suites.push(suite);
    Ok(())
}
