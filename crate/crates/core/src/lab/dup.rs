//! The duplicated-class conditional toy: data, model and its metric,
//! attribution and mitigation batteries.

use super::config::{DuplicatedClassSetup, ExperimentConfig, Setup};
use super::table::{num, Check, CsvTable, SuiteTable};
use crate::batch::Batch;
use crate::diffusion::{sample_reverse, GuidanceConfig, SamplerConfig};
use crate::error::{Error, Result};
use crate::memorization::{
    accumulate_all, accumulate_each, accumulate_metric, detect_training_point, optimize_conditioning,
    perturb_components, token_attribution, ComponentPrior, DetectConfig, DetectMethod, Metric, MetricConfig, Partition,
    Scheduling, TrainIndex,
};
use crate::rng::{self, derive_seed};
use crate::scorenet::{train_score_model_logged, ScoreModel};
use crate::stats;

/// Training data of the duplicated-class toy.
#[derive(Debug, Clone)]
pub struct DupData {
    pub points: Batch,
    pub cond: Batch,
    pub classes: Vec<usize>,
    /// One embedding per class; the last class is the memorized one.
    pub embeddings: Vec<Vec<f64>>,
    /// Shared filler sequences for the non-class components.
    pub templates: Vec<Vec<f64>>,
}

impl DupData {
    pub fn generate(setup: &DuplicatedClassSetup, seed: u64) -> Result<Self> {
        let d = setup.memorized_point.len();
        if d < 2 {
            return Err(Error::InvalidArgument(
                "memorized point needs at least 2 coordinates".into(),
            ));
        }
        let k = setup.normal_classes + 1;
        let filler = (setup.components - 1) * setup.width;
        let mut er = rng::rng(derive_seed(seed, 0xe3b));
        let embeddings: Vec<Vec<f64>> = (0..k).map(|_| rng::normal_vec(&mut er, setup.width)).collect();
        let templates: Vec<Vec<f64>> = (0..setup.templates).map(|_| rng::normal_vec(&mut er, filler)).collect();
        let mut r = rng::rng(derive_seed(seed, 0xda7a));
        let mut points = Batch::zeros(0, d);
        let mut cond = Batch::zeros(0, setup.components * setup.width);
        let mut classes = Vec::new();
        let mut push = |x: &[f64], class: usize, r: &mut rng::LabRng| -> Result<()> {
            let mut c = embeddings[class].clone();
            c.extend_from_slice(&templates[rng::below(r, templates.len())]);
            points.push_row(x)?;
            cond.push_row(&c)?;
            classes.push(class);
            Ok(())
        };
        for class in 0..setup.normal_classes {
            let a = std::f64::consts::TAU * class as f64 / setup.normal_classes as f64;
            let mut mu = vec![0.0; d];
            mu[0] = setup.class_radius * a.cos();
            mu[1] = setup.class_radius * a.sin();
            for _ in 0..setup.rows_per_class {
                let x: Vec<f64> = mu
                    .iter()
                    .map(|m| m + setup.class_std * rng::standard_normal(&mut r))
                    .collect();
                push(&x, class, &mut r)?;
            }
        }
        for _ in 0..setup.duplicates {
            push(&setup.memorized_point, setup.normal_classes, &mut r)?;
        }
        Ok(Self {
            points,
            cond,
            classes,
            embeddings,
            templates,
        })
    }
}

/// Trained model plus everything the batteries need.
#[derive(Debug, Clone)]
pub struct DupFixture {
    pub setup: DuplicatedClassSetup,
    pub data: DupData,
    pub model: ScoreModel,
    pub losses: Vec<f64>,
    pub index: TrainIndex,
    pub partition: Partition,
    pub metrics: MetricConfig,
    pub sampler: SamplerConfig,
    pub detect: DetectConfig,
    pub eval_seed: u64,
}

impl DupFixture {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let Setup::DuplicatedClass(setup) = &cfg.setup else {
            return Err(Error::InvalidArgument("not a duplicated-class config".into()));
        };
        let data = DupData::generate(setup, cfg.data_seed)?;
        let out = train_score_model_logged(&data.points, cfg.schedule, Some(&data.cond), &cfg.train)?;
        Self::from_model(cfg, data, out.model, out.losses)
    }

    pub fn from_model(cfg: &ExperimentConfig, data: DupData, model: ScoreModel, losses: Vec<f64>) -> Result<Self> {
        let Setup::DuplicatedClass(setup) = &cfg.setup else {
            return Err(Error::InvalidArgument("not a duplicated-class config".into()));
        };
        if model.cond_dim() != setup.components * setup.width {
            return Err(Error::DimensionMismatch {
                expected: setup.components * setup.width,
                got: model.cond_dim(),
            });
        }
        Ok(Self {
            index: TrainIndex::deduplicated(&data.points, setup.calib_k)?,
            partition: Partition::uniform(setup.components, setup.width)?,
            setup: setup.clone(),
            data,
            model,
            losses,
            metrics: cfg.metrics.clone(),
            sampler: cfg.sampler.clone(),
            detect: cfg.detect.clone(),
            eval_seed: cfg.eval_seed,
        })
    }

    pub fn memorized_class(&self) -> usize {
        self.setup.normal_classes
    }

    /// Class embedding followed by a filler template chosen by `seed`.
    pub fn prompt(&self, class: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(seed);
        let mut c = self.data.embeddings[class].clone();
        c.extend_from_slice(&self.data.templates[rng::below(&mut r, self.data.templates.len())]);
        c
    }

    /// Each component resamples from the values it takes in the training
    /// conditions: class embeddings for the first, template slices otherwise.
    pub fn prior(&self) -> ComponentPrior {
        let w = self.setup.width;
        let mut pools = vec![self.data.embeddings.clone()];
        for j in 1..self.setup.components {
            pools.push(
                self.data
                    .templates
                    .iter()
                    .map(|t| t[(j - 1) * w..j * w].to_vec())
                    .collect(),
            );
        }
        ComponentPrior::Pools { pools }
    }

    fn repeat_seed(&self, rep: usize) -> u64 {
        derive_seed(self.eval_seed, 1000 + rep as u64)
    }

    fn metric_cfg(&self, seed: u64) -> MetricConfig {
        MetricConfig {
            seed,
            ..self.metrics.clone()
        }
    }

    /// Mean calibrated ratio of guided samples for `c`.
    pub fn mean_ratio(&self, c: &[f64], n: usize, seed: u64) -> Result<f64> {
        let sampler = SamplerConfig {
            n,
            seed,
            record_trajectory: false,
            ..self.sampler.clone()
        };
        let g = GuidanceConfig::new(self.metrics.lambda)?;
        let xs = sample_reverse(&self.model, &sampler, Some(c), Some(g))?.samples;
        let mut total = 0.0;
        for x in xs.iter_rows() {
            total += self.index.query(x)?.ratio;
        }
        Ok(total / n as f64)
    }
}

/// Metric identities, class separation and the norm correlation.
pub fn metric_battery(fx: &DupFixture) -> Result<(SuiteTable, CsvTable, CsvTable)> {
    let mut suite = SuiteTable::new("metrics");
    let model = &fx.model;
    let d = model.ambient_dim();
    let mem = fx.memorized_class();

    let null = model.null_condition();
    let a0 = accumulate_metric(model, &null, Metric::ACfg, &fx.metric_cfg(fx.eval_seed))?;
    suite.push(Check::new(
        "A_CFG at the null condition is exactly zero",
        num(a0.value),
        "== 0",
        a0.value == 0.0,
    ));

    let mut worst: f64 = 0.0;
    for class in [mem, 0] {
        for sched in [Scheduling::Uniform01, Scheduling::Uniform002] {
            let c = fx.prompt(class, fx.repeat_seed(0));
            let [_, scfg, fl] = accumulate_all(model, &c, &fx.metric_cfg(fx.eval_seed), sched)?;
            let traces: Vec<f64> = fl
                .records
                .iter()
                .filter(|r| r.in_support)
                .filter_map(|r| r.trace_term)
                .collect();
            let trace_mean = traces.iter().sum::<f64>() / traces.len() as f64;
            worst = worst.max((fl.value - (d as f64 + scfg.value + trace_mean)).abs());
        }
    }
    suite.push(Check::new(
        "A_FLIPD = d + A_SCFG + mean trace term on shared trajectories",
        format!("{worst:e}"),
        "<= 1e-10",
        worst <= 1e-10,
    ));

    let mut values = CsvTable::new([
        ("repeat", "evaluation repetition"),
        ("class", "class index of the prompt"),
        ("memorized", "whether the class is the duplicated one"),
        ("a_cfg", "accumulated CFG-vector metric"),
        ("a_scfg", "accumulated CFG-adjusted score metric"),
        ("a_flipd", "accumulated FLIPD metric"),
    ]);
    let mut norms = CsvTable::new([
        ("repeat", "evaluation repetition"),
        ("chain", "trajectory index"),
        ("step", "sampler step"),
        ("t", "diffusion time"),
        ("cfg_vector_norm", "sigma-tilde times the CFG vector norm"),
        ("cfg_adjusted_norm", "sigma-tilde times the CFG-adjusted score norm"),
    ]);
    let mut pos = [Vec::new(), Vec::new(), Vec::new()];
    let mut neg = [Vec::new(), Vec::new(), Vec::new()];
    let (mut vx, mut vy) = (Vec::new(), Vec::new());
    for rep in 0..fx.setup.eval_repeats {
        let seed = fx.repeat_seed(rep);
        for class in 0..=mem {
            let c = fx.prompt(class, derive_seed(seed, class as u64));
            let reports = accumulate_each(model, &c, &fx.metric_cfg(seed))?;
            for (i, r) in reports.iter().enumerate() {
                // Detector convention: higher means more memorized.
                let score = if r.metric.higher_is_memorized() {
                    r.value
                } else {
                    -r.value
                };
                if class == mem {
                    pos[i].push(score);
                } else {
                    neg[i].push(score);
                }
            }
            values.push(vec![
                rep.to_string(),
                class.to_string(),
                (class == mem).to_string(),
                num(reports[0].value),
                num(reports[1].value),
                num(reports[2].value),
            ]);
            if class == mem {
                for rec in &reports[0].records {
                    vx.push(rec.cfg_vector_norm);
                    vy.push(rec.cfg_adjusted_norm);
                    norms.push(vec![
                        rep.to_string(),
                        rec.chain.to_string(),
                        rec.step.to_string(),
                        num(rec.t),
                        num(rec.cfg_vector_norm),
                        num(rec.cfg_adjusted_norm),
                    ]);
                }
            }
        }
    }
    for (i, m) in Metric::ALL.iter().enumerate() {
        let auc = stats::auc(&pos[i], &neg[i]).unwrap_or(f64::NAN);
        suite.push(Check::new(
            format!("{} separates the duplicated class from normal classes (AUC)", m.name()),
            num(auc),
            format!(">= {}", fx.setup.auc_min),
            auc >= fx.setup.auc_min,
        ));
    }
    let (r, p) = stats::pearson(&vx, &vy).unwrap_or((f64::NAN, f64::NAN));
    suite.push(Check::new(
        "per-step CFG-vector and CFG-adjusted norms correlate positively on memorized prompts",
        format!("r = {r:.4}, p = {p:e}"),
        "r > 0 and p < 0.01",
        r > 0.0 && p < 0.01,
    ));

    // cfg_norm detector on the duplicated training point versus ordinary rows.
    let dup_row = fx
        .data
        .classes
        .iter()
        .position(|&c| c == mem)
        .expect("memorized rows exist");
    let det = |i: usize| {
        detect_training_point(
            model,
            fx.data.points.row(i),
            Some(fx.data.cond.row(i)),
            DetectMethod::CfgNorm,
            &fx.detect,
        )
    };
    let dup_score = det(dup_row)?;
    let step = (fx.data.classes.len() / 200).max(1);
    let mut others = Vec::new();
    for i in (0..fx.data.classes.len()).step_by(step) {
        if fx.data.classes[i] != mem {
            others.push(det(i)?);
        }
    }
    let p90 = stats::percentile(&others, 90.0).unwrap_or(f64::NAN);
    suite.push(
        Check::new(
            "cfg_norm score of the duplicated training point exceeds the 90th percentile of ordinary rows",
            format!("{} vs {}", num(dup_score), num(p90)),
            "score > p90",
            dup_score > p90,
        )
        .informational(),
    );
    Ok((suite, values, norms))
}

/// Attribution argmax, mitigation against no mitigation and the random
/// baseline, and direct conditioning optimization.
pub fn mitigation_battery(fx: &DupFixture, metrics: &[Metric]) -> Result<(SuiteTable, CsvTable)> {
    let mut suite = SuiteTable::new("mitigation");
    let mem = fx.memorized_class();
    let n = fx.setup.mitigation_samples;
    let prior = fx.prior();
    let mut rows = CsvTable::new([
        ("metric", "metric driving the attribution"),
        ("repeat", "evaluation repetition"),
        ("k", "number of replaced components"),
        ("baseline_ratio", "mean calibrated ratio without mitigation"),
        (
            "attribution_ratio",
            "mean calibrated ratio after attribution-guided replacement, averaged over draws",
        ),
        (
            "random_ratio",
            "mean calibrated ratio after uniformly random replacement, averaged over draws",
        ),
        (
            "attribution_selected",
            "components replaced by the attribution strategy, draws separated by |",
        ),
        (
            "random_selected",
            "components replaced by the random strategy, draws separated by |",
        ),
    ]);
    let reps = fx.setup.eval_repeats;
    let prompts: Vec<Vec<f64>> = (0..reps)
        .map(|r| fx.prompt(mem, derive_seed(fx.repeat_seed(r), 0xc0)))
        .collect();
    let sample_seed = |r: usize| derive_seed(fx.repeat_seed(r), 0x5a);
    let mut base = Vec::with_capacity(reps);
    for (r, c) in prompts.iter().enumerate() {
        base.push(fx.mean_ratio(c, n, sample_seed(r))?);
    }
    for &metric in metrics {
        let mut argmax_hits = 0;
        let mut class_weight = 0.0;
        let mut attributions = Vec::with_capacity(reps);
        for (r, c) in prompts.iter().enumerate() {
            let a = token_attribution(&fx.model, c, &fx.partition, metric, &fx.metric_cfg(fx.repeat_seed(r)))?;
            let top = (0..a.weights.len())
                .max_by(|&i, &j| a.weights[i].total_cmp(&a.weights[j]))
                .unwrap_or(0);
            argmax_hits += usize::from(top == 0 && !a.degenerate);
            class_weight += a.weights[0] / reps as f64;
            attributions.push(a);
        }
        suite.push(
            Check::new(
                format!("{}: mean normalized attribution of the class component", metric.name()),
                num(class_weight),
                format!("> 1/{} (uniform)", fx.partition.len()),
                class_weight > 1.0 / fx.partition.len() as f64,
            )
            .informational(),
        );
        let frac = argmax_hits as f64 / reps as f64;
        suite.push(Check::new(
            format!("{}: attribution argmax is the class component", metric.name()),
            format!("{argmax_hits}/{reps}"),
            ">= 90% of repeats",
            frac >= 0.9,
        ));
        let draws = fx.setup.mitigation_draws;
        for &k in &fx.setup.mitigation_k {
            let (mut att, mut rnd) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
            for (r, c) in prompts.iter().enumerate() {
                let (mut att_r, mut rnd_r) = (0.0, 0.0);
                let (mut att_sel, mut rnd_sel) = (Vec::new(), Vec::new());
                for d in 0..draws {
                    // Both strategies share the perturbation seed and the sample seed.
                    let ms = derive_seed(fx.repeat_seed(r), 0x100 + (k * draws + d) as u64);
                    let (ca, sa) = perturb_components(c, &fx.partition, Some(&attributions[r].weights), k, &prior, ms)?;
                    let (cb, sb) = perturb_components(c, &fx.partition, None, k, &prior, ms)?;
                    att_r += fx.mean_ratio(&ca, n, sample_seed(r))? / draws as f64;
                    rnd_r += fx.mean_ratio(&cb, n, sample_seed(r))? / draws as f64;
                    att_sel.push(sa);
                    rnd_sel.push(sb);
                }
                att.push(att_r);
                rnd.push(rnd_r);
                let sel = |s: &[Vec<usize>]| {
                    s.iter()
                        .map(|v| v.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(";"))
                        .collect::<Vec<_>>()
                        .join("|")
                };
                rows.push(vec![
                    metric.name().into(),
                    r.to_string(),
                    k.to_string(),
                    num(base[r]),
                    num(att_r),
                    num(rnd_r),
                    sel(&att_sel),
                    sel(&rnd_sel),
                ]);
            }
            let (_, p_base) = stats::paired_t_greater(&att, &base).unwrap_or((f64::NAN, f64::NAN));
            let gain = stats::mean(&att) - stats::mean(&base);
            suite.push(Check::new(
                format!(
                    "{} k={k}: attribution mitigation raises the mean calibrated ratio",
                    metric.name()
                ),
                format!("gain {gain:.4}, p = {p_base:e}"),
                "gain > 0 and paired p < 0.05",
                gain > 0.0 && p_base < 0.05,
            ));
            let (_, p_rnd) = stats::paired_t_greater(&att, &rnd).unwrap_or((f64::NAN, f64::NAN));
            let edge = stats::mean(&att) - stats::mean(&rnd);
            suite.push(Check::new(
                format!("{} k={k}: attribution beats random replacement", metric.name()),
                format!("edge {edge:.4}, p = {p_rnd:e}"),
                "paired p < 0.05",
                p_rnd < 0.05,
            ));
        }
    }

    if fx.setup.optimize_steps > 0 {
        let c0 = &prompts[0];
        let path = optimize_conditioning(
            &fx.model,
            c0,
            Metric::AFlipd,
            &fx.metrics,
            fx.setup.optimize_steps,
            fx.setup.optimize_lr,
            fx.repeat_seed(0),
        )?;
        let (first, last) = (&path[0], &path[path.len() - 1]);
        let pooled = (first.std_error.powi(2) + last.std_error.powi(2)).sqrt();
        suite.push(
            Check::new(
                "direct optimization raises A_FLIPD by two pooled standard errors",
                format!(
                    "{} -> {} (pooled SE {})",
                    num(first.value),
                    num(last.value),
                    num(pooled)
                ),
                "final - initial >= 2 SE",
                last.value - first.value >= 2.0 * pooled,
            )
            .informational(),
        );
        let before = fx.mean_ratio(c0, n, sample_seed(0))?;
        let after = fx.mean_ratio(&last.c, n, sample_seed(0))?;
        suite.push(
            Check::new(
                "direct optimization raises the calibrated ratio of samples",
                format!("{} -> {}", num(before), num(after)),
                "after > before",
                after > before,
            )
            .informational(),
        );
    }
    Ok((suite, rows))
}
