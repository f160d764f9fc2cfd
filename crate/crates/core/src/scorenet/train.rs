//! Denoising score matching with Adam.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{self, Architecture};
use super::model::ScoreModel;
use crate::batch::Batch;
use crate::diffusion::schedule::Schedule;
use crate::error::{Error, Result};
use crate::rng::{self, LabRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Training times are drawn uniformly from `(t_min, 1]`.
    pub t_min: f64,
    /// Probability of replacing a row's condition with `∅` during training.
    pub cond_drop_prob: f64,
    pub hidden: Vec<usize>,
    pub time_features: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            t_min: 1e-4,
            cond_drop_prob: 0.1,
            hidden: vec![256, 256, 256],
            time_features: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return bad("t_min must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return bad("cond_drop_prob must lie in [0, 1]");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// Trained model plus the per-step minibatch losses.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScoreModel,
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

fn check_inputs(data: &Batch, cond: Option<&Batch>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    if !data.all_finite() {
        return Err(Error::NonFinite("training data".into()));
    }
    if let Some(c) = cond {
        if c.rows() != data.rows() {
            return Err(Error::DimensionMismatch {
                expected: data.rows(),
                got: c.rows(),
            });
        }
        if !c.all_finite() {
            return Err(Error::NonFinite("conditioning vectors".into()));
        }
    }
    Ok(())
}

/// Fits an ε-prediction network to `data` (optionally conditioned per row).
pub fn train_score_model(
    data: &Batch,
    schedule: Schedule,
    cond: Option<&Batch>,
    cfg: &TrainConfig,
) -> Result<ScoreModel> {
    Ok(train_score_model_logged(data, schedule, cond, cfg)?.model)
}

/// As [`train_score_model`], also returning every minibatch loss.
pub fn train_score_model_logged(
    data: &Batch,
    schedule: Schedule,
    cond: Option<&Batch>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_inputs(data, cond)?;
    let cond_dim = cond.map_or(0, Batch::dim);
    let arch = Architecture::new(data.dim(), cond_dim, cfg.hidden.clone(), cfg.time_features);
    let mut init_rng = rng::rng(rng::derive_seed(cfg.seed, 0));
    let mut params = mlp::init_params(&arch, &mut init_rng);
    let mut r = rng::rng(rng::derive_seed(cfg.seed, 1));
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (input, eps) = draw_minibatch(&arch, data, cond, &schedule, cfg, &mut r);
        let cache = mlp::forward(&arch, &params, input);
        let b = cfg.batch_size as f64;
        let mut resid = cache.output() - &eps;
        let loss = resid.norm_squared() / b;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        losses.push(loss);
        resid *= 2.0 / b;
        let grad = mlp::backward(&arch, &params, &cache, resid);
        adam.step(&mut params, &grad);
    }
    log::debug!(
        "trained {} params for {} steps, final loss {:?}",
        params.len(),
        cfg.steps,
        losses.last()
    );
    let model = ScoreModel::trained(arch, params, schedule, cfg.seed, cfg.steps)?;
    Ok(TrainOutcome { model, losses })
}

/// Network inputs (`in × B`) and target noise (`d × B`) for one minibatch.
fn draw_minibatch(
    arch: &Architecture,
    data: &Batch,
    cond: Option<&Batch>,
    schedule: &Schedule,
    cfg: &TrainConfig,
    r: &mut LabRng,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = arch.ambient_dim;
    let bsz = cfg.batch_size;
    let mut input = Vec::with_capacity(arch.input_dim() * bsz);
    let mut eps = Vec::with_capacity(d * bsz);
    for _ in 0..bsz {
        let i = r.random_range(0..data.rows());
        let t = 1.0 - (1.0 - cfg.t_min) * rng::uniform(r);
        let (psi, sigma) = (schedule.psi(t), schedule.sigma(t));
        for &x in data.row(i) {
            let e = rng::standard_normal(r);
            input.push(psi * x + sigma * e);
            eps.push(e);
        }
        input.extend(mlp::time_features(t, arch.time_features));
        if let Some(c) = cond {
            if rng::uniform(r) < cfg.cond_drop_prob {
                input.extend(std::iter::repeat_n(0.0, c.dim()));
            } else {
                input.extend_from_slice(c.row(i));
            }
        }
    }
    (
        DMatrix::from_vec(arch.input_dim(), bsz, input),
        DMatrix::from_vec(d, bsz, eps),
    )
}

/// Mean ε-prediction loss over `draws` noised copies of each row.
///
/// Times and noise come from `seed` only, so two models compared with the
/// same seed see the same noised batch.
pub fn dsm_loss(
    model: &ScoreModel,
    data: &Batch,
    cond: Option<&Batch>,
    draws: usize,
    t_min: f64,
    seed: u64,
) -> Result<f64> {
    check_inputs(data, cond)?;
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be positive".into()));
    }
    if data.dim() != model.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.ambient_dim(),
            got: data.dim(),
        });
    }
    let schedule = *model.schedule();
    let mut r = rng::rng(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..data.rows() {
        let c = cond.map(|c| c.row(i));
        for _ in 0..draws {
            let t = 1.0 - (1.0 - t_min) * rng::uniform(&mut r);
            let (psi, sigma) = (schedule.psi(t), schedule.sigma(t));
            let e = rng::normal_vec(&mut r, data.dim());
            let xt: Vec<f64> = data.row(i).iter().zip(&e).map(|(x, e)| psi * x + sigma * e).collect();
            let s = model.eval_score(&xt, t, c)?;
            // ε̂ = −σ s
            total += s.iter().zip(&e).map(|(s, e)| (-sigma * s - e).powi(2)).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 64,
            hidden: vec![32, 32],
            time_features: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn origin_data() -> Batch {
        Batch::zeros(64, 2)
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let cfg = small_cfg(0);
        let m = train_score_model(&origin_data(), Schedule::default(), None, &cfg).unwrap();
        let arch = m.as_trained().unwrap().architecture().clone();
        let mut r = rng::rng(rng::derive_seed(cfg.seed, 0));
        assert_eq!(m.as_trained().unwrap().params(), &mlp::init_params(&arch, &mut r)[..]);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = small_cfg(50);
        let a = train_score_model(&origin_data(), Schedule::default(), None, &cfg).unwrap();
        let b = train_score_model(&origin_data(), Schedule::default(), None, &cfg).unwrap();
        assert_eq!(a.as_trained(), b.as_trained());
    }

    #[test]
    fn loss_decreases() {
        let data = origin_data();
        let before = train_score_model(&data, Schedule::default(), None, &small_cfg(0)).unwrap();
        let after = train_score_model(&data, Schedule::default(), None, &small_cfg(400)).unwrap();
        let l0 = dsm_loss(&before, &data, None, 4, 1e-4, 99).unwrap();
        let l1 = dsm_loss(&after, &data, None, 4, 1e-4, 99).unwrap();
        assert!(l1.is_finite() && l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small_cfg(1);
        let s = Schedule::default();
        assert!(train_score_model(&Batch::zeros(0, 2), s, None, &cfg).is_err());
        let bad = Batch::new(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(train_score_model(&bad, s, None, &cfg).is_err());
        let cond = Batch::zeros(3, 1);
        assert!(train_score_model(&origin_data(), s, Some(&cond), &cfg).is_err());
    }
}
