use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mmhlab_core::diffusion::{sample_reverse, GuidanceConfig, SamplerConfig, SamplerKind};
use mmhlab_core::lab::{
    num, run_experiment, setup_suite, verify_suite, CsvTable, ExperimentConfig, RunReport, Setup, REPORT_FILE, SUITES,
};
use mmhlab_core::lid::{flipd, lpca_lid, nb_lid, FlipdConfig, LpcaConfig, NbConfig};
use mmhlab_core::manifolds::{sample_manifold, ManifoldSpec};
use mmhlab_core::memorization::{
    accumulate_each, accumulate_metric, detect_training_point, label_and_classify, mitigate_prompt,
    optimize_conditioning, ComponentPrior, DetectConfig, DetectMethod, Metric, MetricConfig, MitigationStrategy,
    Partition, TrainIndex,
};
use mmhlab_core::scorenet::{load_checkpoint, save_checkpoint, train_score_model_logged, ScoreModel};
use mmhlab_core::Batch;

mod points;

use points::{parse_vector, read_points};

#[derive(Parser)]
#[command(
    name = "mmhlab",
    version,
    about = "Toy diffusion models, LID estimators and memorization diagnostics"
)]
struct Cli {
    /// Experiment config (JSON). Commands fall back to its settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw samples from a manifold spec.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(short, long, default_value_t = 1000)]
        n: usize,
    },
    /// Train a score network on a CSV of points.
    Train {
        /// Training points; defaults to the config's synthetic data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-row conditioning vectors.
        #[arg(long)]
        cond: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate samples from a checkpoint.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Estimate LID at each row of a points CSV.
    Lid {
        /// Score-model checkpoint (FLIPD and NB).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        points: PathBuf,
        #[arg(long, value_enum, default_value = "flipd")]
        estimator: LidKind,
        #[arg(long)]
        t0: Option<f64>,
        /// Reference dataset for LPCA.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score points for memorization and label them against a training set.
    Detect {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        points: PathBuf,
        #[arg(long, value_enum, default_value = "flipd")]
        method: MethodKind,
        #[arg(long)]
        cond: Option<String>,
        /// Training set for near/exact labels.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        calib_k: usize,
    },
    /// Accumulate memorization metrics for one condition.
    Metrics {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long, value_enum)]
        metric: Option<MetricKind>,
    },
    /// Replace the most memorization-driving components of a condition.
    Mitigate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long, value_enum, default_value = "a-cfg")]
        metric: MetricKind,
        /// Number of equal-width components the condition splits into.
        #[arg(long)]
        components: usize,
        #[arg(short, long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_enum, default_value = "attribution")]
        strategy: StrategyKind,
    },
    /// Optimize the condition directly against a metric.
    OptimizeCond {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long, value_enum, default_value = "a-flipd")]
        metric: MetricKind,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Run invariant batteries; `all` runs every battery.
    Verify {
        #[arg(required = true)]
        suites: Vec<String>,
    },
    /// Run a full experiment from the config or a preset.
    Run {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Print a run report.
    Report {
        /// Report file or run directory; defaults to the output directory.
        path: Option<PathBuf>,
    },
    /// Write a preset config to stdout or `--out`.
    Preset { name: String },
}

#[derive(Args)]
struct ModelArgs {
    /// Score-model checkpoint.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct PromptArgs {
    /// Comma-separated conditioning vector, or `null` for the null condition.
    #[arg(long = "prompt")]
    prompt: Option<String>,
    /// Guidance strength.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ode,
    Sde,
    Ddim,
}

#[derive(Clone, Copy, ValueEnum)]
enum LidKind {
    Flipd,
    Nb,
    Lpca,
}

impl LidKind {
    fn name(self) -> &'static str {
        match self {
            LidKind::Flipd => "flipd",
            LidKind::Nb => "nb",
            LidKind::Lpca => "lpca",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodKind {
    CfgNorm,
    Flipd,
    FlipdCond,
}

#[derive(Clone, Copy, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum MetricKind {
    ACfg,
    AScfg,
    AFlipd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyKind {
    Attribution,
    Random,
}

impl From<MetricKind> for Metric {
    fn from(m: MetricKind) -> Self {
        match m {
            MetricKind::ACfg => Metric::ACfg,
            MetricKind::AScfg => Metric::AScfg,
            MetricKind::AFlipd => Metric::AFlipd,
        }
    }
}

struct Ctx {
    config: Option<ExperimentConfig>,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut config = cli.config.as_deref().map(ExperimentConfig::load).transpose()?;
        if let (Some(cfg), Some(seed)) = (config.as_mut(), cli.seed) {
            cfg.reseed(seed);
        }
        let out = cli
            .out
            .clone()
            .or_else(|| config.as_ref().map(|c| c.out_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        if let Some(cfg) = config.as_mut() {
            cfg.out_dir = out.clone();
        }
        Ok(Self { config, out })
    }

    fn metrics(&self, seed: Option<u64>, lambda: Option<f64>) -> MetricConfig {
        let mut m = self.config.as_ref().map(|c| c.metrics.clone()).unwrap_or_default();
        if let Some(s) = seed {
            m.seed = s;
        }
        if let Some(l) = lambda {
            m.lambda = l;
        }
        m
    }

    fn write(&self, table: &CsvTable, stem: &str) -> Result<PathBuf> {
        let path = table.write(&self.out, stem)?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn write_json<T: serde::Serialize>(&self, value: &T, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

fn point_table(points: &Batch) -> CsvTable {
    let mut t = CsvTable::new((0..points.dim()).map(|j| (format!("x{j}"), format!("coordinate {j}"))));
    for r in points.iter_rows() {
        t.push(r.iter().map(|v| num(*v)).collect());
    }
    t
}

fn prompt_of(model: &ScoreModel, p: &PromptArgs) -> Result<Vec<f64>> {
    match p.prompt.as_deref() {
        None => bail!("--prompt is required"),
        Some("null") => Ok(model.null_condition()),
        Some(s) => parse_vector(s),
    }
}

fn manifold_spec(ctx: &Ctx) -> Result<ManifoldSpec> {
    match ctx.config.as_ref().map(|c| &c.setup) {
        Some(Setup::Manifold(m)) => Ok(m.spec.resolve()?),
        _ => bail!("needs --spec or a config with a manifold setup"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether every requested check passed.
fn dispatch(cli: &Cli) -> Result<bool> {
    let ctx = Ctx::new(cli)?;
    let seed = cli.seed;
    match &cli.command {
        Command::Synth { spec, n } => {
            let spec = match spec {
                Some(p) => ManifoldSpec::load(p)?,
                None => manifold_spec(&ctx)?,
            };
            let drawn = sample_manifold(&spec, *n, seed.unwrap_or(0))?;
            let mut t = point_table(&drawn.points);
            t.columns
                .push(("component".into(), "index of the generating component".into()));
            for (row, c) in t.rows.iter_mut().zip(&drawn.component_ids) {
                row.push(c.to_string());
            }
            ctx.write(&t, "synth")?;
        }
        Command::Train { data, cond, steps } => {
            let mut tc = ctx.config.as_ref().map(|c| c.train.clone()).unwrap_or_default();
            if let Some(s) = steps {
                tc.steps = *s;
            }
            if let Some(s) = seed {
                tc.seed = s;
            }
            let schedule = ctx.config.as_ref().map(|c| c.schedule).unwrap_or_default();
            let (points, conds) = match data {
                Some(p) => (read_points(p)?, cond.as_deref().map(read_points).transpose()?),
                None => config_training_data(&ctx)?,
            };
            let out = train_score_model_logged(&points, schedule, conds.as_ref(), &tc)?;
            std::fs::create_dir_all(&ctx.out)?;
            let ckpt = ctx.out.join("model.ckpt");
            save_checkpoint(&out.model, &ckpt)?;
            println!("wrote {}", ckpt.display());
            let mut t = CsvTable::new([("step", "training step"), ("loss", "minibatch denoising loss")]);
            for (i, l) in out.losses.iter().enumerate() {
                t.push(vec![(i + 1).to_string(), num(*l)]);
            }
            ctx.write(&t, "losses")?;
        }
        Command::Sample {
            model,
            n,
            steps,
            kind,
            prompt,
        } => {
            let m = load_checkpoint(&model.model)?;
            let mut sc = ctx
                .config
                .as_ref()
                .map(|c| c.sampler.clone())
                .unwrap_or_else(SamplerConfig::default);
            if let Some(n) = n {
                sc.n = *n;
            }
            if let Some(s) = steps {
                sc.steps = *s;
            }
            if let Some(k) = kind {
                sc.kind = match k {
                    Kind::Ode => SamplerKind::Ode,
                    Kind::Sde => SamplerKind::Sde,
                    Kind::Ddim => SamplerKind::Ddim,
                };
            }
            if let Some(s) = seed {
                sc.seed = s;
            }
            let c = prompt.prompt.as_ref().map(|_| prompt_of(&m, prompt)).transpose()?;
            let g = prompt.lambda.map(GuidanceConfig::new).transpose()?;
            let xs = sample_reverse(&m, &sc, c.as_deref(), g)?.samples;
            ctx.write(&point_table(&xs), "samples")?;
        }
        Command::Lid {
            model,
            points,
            estimator,
            t0,
            data,
        } => {
            let m = || match model {
                Some(p) => Ok(load_checkpoint(p)?),
                None => bail!("{} needs --model", estimator.name()),
            };
            let xs = read_points(points)?;
            let mut t = point_table(&xs);
            t.columns
                .push(("lid".into(), "estimated local intrinsic dimension".into()));
            let values: Vec<f64> = match estimator {
                LidKind::Flipd => {
                    let mut fc = ctx
                        .config
                        .as_ref()
                        .map(|c| c.flipd.clone())
                        .unwrap_or_else(FlipdConfig::default);
                    if let Some(t0) = t0 {
                        fc.t0 = *t0;
                    }
                    let m = m()?;
                    xs.iter_rows()
                        .map(|x| Ok(flipd(&m, x, &fc, None)?.value))
                        .collect::<Result<_>>()?
                }
                LidKind::Nb => {
                    let nc = NbConfig {
                        t0: t0.unwrap_or(NbConfig::default().t0),
                        seed: seed.unwrap_or(0),
                        ..NbConfig::default()
                    };
                    let m = m()?;
                    xs.iter_rows()
                        .map(|x| Ok(nb_lid(&m, x, &nc, None)?.value))
                        .collect::<Result<_>>()?
                }
                LidKind::Lpca => {
                    let Some(d) = data else { bail!("LPCA needs --data") };
                    let ds = read_points(d)?;
                    xs.iter_rows()
                        .map(|x| Ok(lpca_lid(&ds, x, &LpcaConfig::default())?.value))
                        .collect::<Result<_>>()?
                }
            };
            for (row, v) in t.rows.iter_mut().zip(&values) {
                row.push(num(*v));
            }
            ctx.write(&t, "lid")?;
        }
        Command::Detect {
            model,
            points,
            method,
            cond,
            train,
            calib_k,
        } => {
            let m = load_checkpoint(&model.model)?;
            let xs = read_points(points)?;
            let c = cond.as_deref().map(parse_vector).transpose()?;
            let (method, name) = match method {
                MethodKind::CfgNorm => (DetectMethod::CfgNorm, "cfg_norm"),
                MethodKind::Flipd => (DetectMethod::Flipd, "flipd"),
                MethodKind::FlipdCond => (DetectMethod::FlipdCond, "flipd_cond"),
            };
            let dc = ctx
                .config
                .as_ref()
                .map(|c| c.detect.clone())
                .unwrap_or_else(DetectConfig::default);
            let thresholds = ctx.config.as_ref().map(|c| c.thresholds).unwrap_or_default();
            let hash = ctx.config.as_ref().map(|c| c.hash()).transpose()?.unwrap_or_default();
            let scores: Vec<f64> = xs
                .iter_rows()
                .map(|x| Ok(detect_training_point(&m, x, c.as_deref(), method, &dc)?))
                .collect::<Result<_>>()?;
            let labels = match train {
                Some(p) => {
                    let index = TrainIndex::deduplicated(&read_points(p)?, *calib_k)?;
                    let fc = ctx
                        .config
                        .as_ref()
                        .map(|c| c.flipd.clone())
                        .unwrap_or_else(FlipdConfig::default);
                    let lids = xs
                        .iter_rows()
                        .map(|x| Ok(flipd(&m, x, &fc, None)?))
                        .collect::<Result<Vec<_>>>()?;
                    Some(label_and_classify(&xs, &index, None, &lids, &thresholds)?)
                }
                None => None,
            };
            let mut t = CsvTable::new([
                ("point_id", "row of the points file"),
                ("method", "detection method"),
                ("score", "detection score; higher means more likely memorized"),
                ("label", "memorization label against --train, empty without it"),
                ("mem_type", "memorization type, empty without --train"),
                ("config_hash", "hash of the experiment config, empty without --config"),
            ]);
            for (i, s) in scores.iter().enumerate() {
                let (label, ty) = labels.as_ref().map_or((String::new(), String::new()), |l| {
                    (l[i].label.name().into(), l[i].mem_type.name().into())
                });
                t.push(vec![i.to_string(), name.into(), num(*s), label, ty, hash.clone()]);
            }
            ctx.write(&t, "detect")?;
        }
        Command::Metrics { model, prompt, metric } => {
            let m = load_checkpoint(&model.model)?;
            let c = prompt_of(&m, prompt)?;
            let mc = ctx.metrics(seed, prompt.lambda);
            let reports = match metric {
                Some(k) => vec![accumulate_metric(&m, &c, (*k).into(), &mc)?],
                None => accumulate_each(&m, &c, &mc)?.to_vec(),
            };
            for r in &reports {
                println!(
                    "{} = {} (± {}, n = {}, λ = {})",
                    r.metric.name(),
                    r.value,
                    r.std_error(),
                    r.n,
                    r.lambda
                );
            }
            ctx.write_json(&reports, "metrics.json")?;
        }
        Command::Mitigate {
            model,
            prompt,
            metric,
            components,
            k,
            strategy,
        } => {
            let m = load_checkpoint(&model.model)?;
            let c = prompt_of(&m, prompt)?;
            if *components == 0 || c.len() % components != 0 {
                bail!(
                    "condition of length {} does not split into {components} equal components",
                    c.len()
                );
            }
            let partition = Partition::uniform(*components, c.len() / components)?;
            let strategy = match strategy {
                StrategyKind::Attribution => MitigationStrategy::Attribution,
                StrategyKind::Random => MitigationStrategy::Random,
            };
            let mc = ctx.metrics(seed, prompt.lambda);
            let out = mitigate_prompt(
                &m,
                &c,
                &partition,
                (*metric).into(),
                &mc,
                *k,
                strategy,
                &ComponentPrior::StandardNormal,
                seed.unwrap_or(0),
            )?;
            println!("replaced components {:?}", out.selected);
            ctx.write_json(&out, "mitigation.json")?;
        }
        Command::OptimizeCond {
            model,
            prompt,
            metric,
            steps,
            lr,
        } => {
            let m = load_checkpoint(&model.model)?;
            let c = prompt_of(&m, prompt)?;
            let mc = ctx.metrics(seed, prompt.lambda);
            let path = optimize_conditioning(&m, &c, (*metric).into(), &mc, *steps, *lr, seed.unwrap_or(0))?;
            let mut t = CsvTable::new([
                ("step", "optimizer step; 0 is the initial condition"),
                ("value", "metric value"),
                ("std_error", "standard error over chains"),
                ("c", "condition vector, semicolon separated"),
            ]);
            for (i, s) in path.iter().enumerate() {
                let cs = s.c.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";");
                t.push(vec![i.to_string(), num(s.value), num(s.std_error), cs]);
            }
            ctx.write(&t, "optimize")?;
        }
        Command::Verify { suites } => {
            let root = seed.unwrap_or(0);
            let names: Vec<String> = if suites.iter().any(|s| s == "all") {
                SUITES.iter().map(|s| s.to_string()).collect()
            } else {
                suites.clone()
            };
            let mut ok = true;
            for name in &names {
                let table = if name == "config" {
                    let Some(cfg) = ctx.config.as_ref() else {
                        bail!("suite `config` needs --config")
                    };
                    match setup_suite(cfg)? {
                        Some(t) => t,
                        None => bail!("the {} setup has no standalone suite; use `run`", cfg.setup.name()),
                    }
                } else {
                    verify_suite(name, root)?
                };
                print!("{}", table.render());
                ctx.write(&table.to_table(), &format!("verify_{}", table.suite))?;
                ok &= table.passed();
            }
            return Ok(ok);
        }
        Command::Run { preset } => {
            let mut cfg = match (preset, ctx.config.clone()) {
                (Some(p), _) => ExperimentConfig::preset(p, ctx.out.clone())?,
                (None, Some(c)) => c,
                (None, None) => bail!("run needs --config or --preset"),
            };
            if preset.is_some() {
                if let Some(s) = seed {
                    cfg.reseed(s);
                }
            }
            let report = run_experiment(&cfg)?;
            print!("{}", report.render());
            return Ok(report.passed());
        }
        Command::Report { path } => {
            let p = path.clone().unwrap_or_else(|| ctx.out.clone());
            let file = if p.is_dir() { p.join(REPORT_FILE) } else { p };
            let report = RunReport::load(&file)?;
            print!("{}", report.render());
            return Ok(report.passed());
        }
        Command::Preset { name } => {
            let cfg = ExperimentConfig::preset(name, ctx.out.clone())?;
            match &cli.out {
                Some(_) => {
                    ctx.write_json(&cfg, "config.json")?;
                }
                None => println!("{}", cfg.to_json()?),
            }
        }
    }
    Ok(true)
}

/// Training rows (and conditions) implied by the config's setup.
fn config_training_data(ctx: &Ctx) -> Result<(Batch, Option<Batch>)> {
    let Some(cfg) = ctx.config.as_ref() else {
        bail!("train needs --data or a config")
    };
    match &cfg.setup {
        Setup::Manifold(m) => {
            let spec = m.spec.resolve()?;
            let mut pts = sample_manifold(&spec, m.n_train, cfg.data_seed)?.points;
            for p in &m.isolated {
                pts.push_row(p)?;
            }
            Ok((pts, None))
        }
        Setup::DuplicatedClass(d) => {
            let data = mmhlab_core::lab::DupData::generate(d, cfg.data_seed)?;
            Ok((data.points, Some(data.cond)))
        }
        other => bail!("the {} setup has no training data", other.name()),
    }
}
