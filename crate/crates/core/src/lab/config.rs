//! Experiment configuration, presets and the stable config hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{SamplerConfig, SamplerKind, Schedule};
use crate::error::{Error, Result};
use crate::lid::{FlipdConfig, LpcaConfig, NbConfig, SingularThreshold, VarianceRule};
use crate::manifolds::ManifoldSpec;
use crate::memorization::{CopyConfig, DetectConfig, MetricConfig, Thresholds};
use crate::rng::derive_seed;
use crate::scorenet::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 4] = ["von-mises", "duplicated-class", "overfit-copy", "analytic-zoo"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub experiment: String,
    pub setup: Setup,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub flipd: FlipdConfig,
    #[serde(default)]
    pub detect: DetectConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Seed of the synthetic training data.
    #[serde(default)]
    pub data_seed: u64,
    /// Seed of evaluation-time randomness (estimator probes, metric trajectories).
    #[serde(default)]
    pub eval_seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setup {
    Manifold(ManifoldSetup),
    DuplicatedClass(DuplicatedClassSetup),
    OverfitCopy(OverfitCopySetup),
    AnalyticZoo(ZooSetup),
}

impl Setup {
    pub fn name(&self) -> &'static str {
        match self {
            Setup::Manifold(_) => "manifold",
            Setup::DuplicatedClass(_) => "duplicated_class",
            Setup::OverfitCopy(_) => "overfit_copy",
            Setup::AnalyticZoo(_) => "analytic_zoo",
        }
    }
}

/// A manifold spec given inline or as a path to a spec JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecRef {
    File { path: PathBuf },
    Inline(ManifoldSpec),
}

impl SpecRef {
    pub fn resolve(&self) -> Result<ManifoldSpec> {
        match self {
            SpecRef::Inline(s) => {
                s.validate()?;
                Ok(s.clone())
            }
            SpecRef::File { path } => ManifoldSpec::load(path),
        }
    }
}

/// Unconditional training on draws from a spec plus hand-placed isolated points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSetup {
    pub spec: SpecRef,
    /// Draws from the spec; the isolated points are appended to these.
    pub n_train: usize,
    #[serde(default)]
    pub isolated: Vec<Vec<f64>>,
    /// Generated samples within this distance of an isolated point count as its copies.
    pub isolated_radius: f64,
    pub n_generate: usize,
    /// The AUC uses the first this-many generated samples.
    pub auc_samples: usize,
    pub auc_min: f64,
    /// Neighbours in the calibrated distance.
    pub calib_k: usize,
}

/// Conditional toy with `K` classes, one of which is a single duplicated point.
/// The conditioning vector has `components` slices of `width` entries: slice 0
/// holds the class embedding, the others one of `templates` filler sequences
/// shared by all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicatedClassSetup {
    pub normal_classes: usize,
    pub class_radius: f64,
    pub class_std: f64,
    pub rows_per_class: usize,
    pub duplicates: usize,
    pub memorized_point: Vec<f64>,
    pub components: usize,
    pub width: usize,
    pub templates: usize,
    /// Seeds of the evaluation repetitions.
    pub eval_repeats: usize,
    pub auc_min: f64,
    pub mitigation_k: Vec<usize>,
    pub mitigation_samples: usize,
    /// Independent perturbations averaged per prompt and k.
    pub mitigation_draws: usize,
    pub optimize_steps: usize,
    pub optimize_lr: f64,
    pub calib_k: usize,
}

/// A rank-`rank` Gaussian with a tight kernel of mass `kernel_weight` at a
/// point of its support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitCopySetup {
    pub ambient_dim: usize,
    pub rank: usize,
    pub kernel_weight: f64,
    pub kernel_std: f64,
    pub atom_weight: f64,
    pub copy: CopyConfig,
    pub trials: usize,
    pub n_mc_grid: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooSetup {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub t0: f64,
    /// Small time at which FLIPD approximates its `t0 → 0` limit.
    pub t0_limit: f64,
    pub points: usize,
    pub nb: NbConfig,
    pub lpca: LpcaConfig,
    pub lpca_samples: usize,
}

impl Default for ZooSetup {
    fn default() -> Self {
        Self {
            dims: vec![2, 3, 5, 10],
            ranks: vec![0, 1, 2, 5],
            t0: 0.01,
            t0_limit: 1e-5,
            points: 3,
            nb: NbConfig {
                t0: 0.01,
                k: None,
                threshold: SingularThreshold::NoiseScaled { factor: 0.3 },
                seed: 0,
            },
            lpca: LpcaConfig {
                variance_rule: VarianceRule::RelativeToMax { ratio: 0.05 },
                ..LpcaConfig::default()
            },
            lpca_samples: 5000,
        }
    }
}

impl Default for OverfitCopySetup {
    fn default() -> Self {
        Self {
            ambient_dim: 3,
            rank: 2,
            kernel_weight: 0.05,
            kernel_std: 1e-3,
            atom_weight: 0.2,
            copy: CopyConfig {
                n_mc: 100_000,
                ..CopyConfig::default()
            },
            trials: 100,
            n_mc_grid: vec![1_000, 10_000, 100_000],
        }
    }
}

impl Default for DuplicatedClassSetup {
    fn default() -> Self {
        Self {
            normal_classes: 5,
            class_radius: 2.0,
            class_std: 0.5,
            rows_per_class: 100,
            duplicates: 20,
            memorized_point: vec![0.0; 8],
            components: 8,
            width: 4,
            templates: 4,
            eval_repeats: 20,
            auc_min: 0.8,
            mitigation_k: vec![1, 2, 3, 4],
            mitigation_samples: 32,
            mitigation_draws: 5,
            optimize_steps: 200,
            optimize_lr: 0.05,
            calib_k: 5,
        }
    }
}

impl ExperimentConfig {
    /// A shipped preset writing under `out_dir`.
    pub fn preset(name: &str, out_dir: impl Into<PathBuf>) -> Result<Self> {
        let out_dir = out_dir.into();
        let base = |experiment: &str, setup: Setup| ExperimentConfig {
            schema: CONFIG_SCHEMA_VERSION,
            experiment: experiment.into(),
            setup,
            schedule: Schedule::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            flipd: FlipdConfig::default(),
            detect: DetectConfig::default(),
            metrics: MetricConfig::default(),
            thresholds: Thresholds::default(),
            data_seed: 1,
            eval_seed: 0,
            out_dir: out_dir.clone(),
        };
        match name {
            "von-mises" => {
                let spec = ManifoldSpec::von_mises_mixture(1.0, 4.0, 0.2)?;
                let mut cfg = base(
                    name,
                    Setup::Manifold(ManifoldSetup {
                        spec: SpecRef::Inline(spec),
                        n_train: 99,
                        isolated: vec![vec![-1.0, 0.0]],
                        isolated_radius: 0.25,
                        n_generate: 500,
                        auc_samples: 100,
                        auc_min: 0.9,
                        calib_k: 5,
                    }),
                );
                cfg.train = TrainConfig {
                    steps: 60_000,
                    batch_size: 100,
                    hidden: vec![128, 128, 128],
                    ..TrainConfig::default()
                };
                cfg.sampler = SamplerConfig {
                    n: 500,
                    steps: 100,
                    kind: SamplerKind::Ddim,
                    seed: 3,
                    ..SamplerConfig::default()
                };
                Ok(cfg)
            }
            "duplicated-class" => {
                let mut cfg = base(name, Setup::DuplicatedClass(DuplicatedClassSetup::default()));
                cfg.train = TrainConfig {
                    steps: 15_000,
                    batch_size: 128,
                    hidden: vec![128, 128, 128],
                    cond_drop_prob: 0.1,
                    ..TrainConfig::default()
                };
                cfg.sampler = SamplerConfig {
                    steps: 50,
                    kind: SamplerKind::Ddim,
                    ..SamplerConfig::default()
                };
                cfg.metrics = MetricConfig {
                    n: 64,
                    steps: 50,
                    lambda: 2.0,
                    ..MetricConfig::default()
                };
                Ok(cfg)
            }
            "overfit-copy" => Ok(base(name, Setup::OverfitCopy(OverfitCopySetup::default()))),
            "analytic-zoo" => Ok(base(name, Setup::AnalyticZoo(ZooSetup::default()))),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset `{other}`; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Replaces every stage seed by one derived from `root`.
    pub fn reseed(&mut self, root: u64) {
        self.data_seed = derive_seed(root, 1);
        self.train.seed = derive_seed(root, 2);
        self.sampler.seed = derive_seed(root, 3);
        self.eval_seed = derive_seed(root, 4);
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "config schema {} is not the supported version {CONFIG_SCHEMA_VERSION}",
                self.schema
            )));
        }
        self.thresholds.validate()?;
        match &self.setup {
            Setup::Manifold(m) => {
                let spec = m.spec.resolve()?;
                for p in &m.isolated {
                    if p.len() != spec.ambient_dim {
                        return Err(Error::DimensionMismatch {
                            expected: spec.ambient_dim,
                            got: p.len(),
                        });
                    }
                }
                if m.n_train + m.isolated.len() <= m.calib_k || m.n_generate == 0 {
                    return Err(Error::InvalidArgument(
                        "manifold setup needs more training rows than calib_k and at least one sample".into(),
                    ));
                }
                self.train.validate()
            }
            Setup::DuplicatedClass(d) => {
                if d.normal_classes == 0 || d.components < 2 || d.width == 0 || d.duplicates == 0 || d.templates == 0 {
                    return Err(Error::InvalidArgument(
                        "duplicated-class setup needs classes, >= 2 components, width, templates and duplicates".into(),
                    ));
                }
                if d.mitigation_draws == 0 {
                    return Err(Error::InvalidArgument("mitigation_draws must be at least 1".into()));
                }
                if d.mitigation_k.iter().any(|&k| k > d.components) {
                    return Err(Error::InvalidArgument(
                        "mitigation k exceeds the component count".into(),
                    ));
                }
                self.train.validate()
            }
            Setup::OverfitCopy(o) => {
                if o.rank > o.ambient_dim || o.trials == 0 {
                    return Err(Error::InvalidArgument(
                        "overfit-copy needs rank <= ambient_dim and trials >= 1".into(),
                    ));
                }
                o.copy.validate()
            }
            Setup::AnalyticZoo(z) => {
                if z.dims.is_empty() || z.ranks.is_empty() || z.points == 0 {
                    return Err(Error::InvalidArgument(
                        "analytic zoo needs dims, ranks and points".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Loads and validates a config. Relative spec paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Setup::Manifold(ManifoldSetup {
            spec: SpecRef::File { path: p },
            ..
        }) = &mut cfg.setup
        {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form, ignoring
    /// `out_dir` so that a run hashes the same wherever it is written.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("out_dir");
        }
        let canonical = serde_json::to_string(&value)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}
