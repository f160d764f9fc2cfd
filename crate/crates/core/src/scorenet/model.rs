use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::mlp::{self, Architecture};
use super::tape::{Mat, Tape, Var};
use crate::batch::{dot, Batch};
use crate::diffusion::schedule::{check_open_time, Schedule};
use crate::error::{Error, Result};
use crate::manifolds::{GaussianMixtureScore, ManifoldSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Analytic,
    Trained,
}

/// Closed-form score of a Gaussian/point-mass mixture.
///
/// When conditional, `c ∈ R^K` weights the class-restricted scores:
/// `s(x, t, c) = (1 − Σc) s_∅ + Σ_j c_j s_j`, so a one-hot `c` selects class
/// `j` exactly and `c = 0` is the unconditional mixture.
#[derive(Debug, Clone)]
pub struct AnalyticModel {
    pub(crate) spec: ManifoldSpec,
    pub(crate) mixture: GaussianMixtureScore,
    pub(crate) conditional: bool,
}

/// A trained ε-prediction network; `s = −ε̂ / σ(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub(crate) arch: Architecture,
    pub(crate) params: Vec<f64>,
    pub(crate) schedule: Schedule,
    pub(crate) seed: u64,
    pub(crate) steps: usize,
}

impl TrainedModel {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn input_column(&self, x: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.arch.input_dim());
        v.extend_from_slice(x);
        v.extend(mlp::time_features(t, self.arch.time_features));
        v.extend_from_slice(c);
        v
    }
}

/// Differentiable score function `s(x, t, c)`.
#[derive(Debug, Clone)]
pub enum ScoreModel {
    Analytic(AnalyticModel),
    Trained(TrainedModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TraceMode {
    /// `d` directional-derivative passes.
    Exact,
    /// Average of `vᵀ∇s v` over Rademacher probes.
    Hutchinson { probes: usize, seed: u64 },
}

impl ScoreModel {
    /// Wraps the closed-form score of `spec`. With `conditional`, the spec
    /// must be class-labeled and `c` is a class-weight vector.
    pub fn analytic(spec: ManifoldSpec, schedule: Schedule, conditional: bool) -> Result<Self> {
        let mixture = GaussianMixtureScore::new(&spec, schedule)?;
        if conditional && mixture.class_count() == 0 {
            return Err(Error::InvalidSpec(
                "conditional analytic model needs class labels".into(),
            ));
        }
        Ok(ScoreModel::Analytic(AnalyticModel {
            spec,
            mixture,
            conditional,
        }))
    }

    pub(crate) fn trained(
        arch: Architecture,
        params: Vec<f64>,
        schedule: Schedule,
        seed: u64,
        steps: usize,
    ) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        Ok(ScoreModel::Trained(TrainedModel {
            arch,
            params,
            schedule,
            seed,
            steps,
        }))
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ScoreModel::Analytic(_) => ModelKind::Analytic,
            ScoreModel::Trained(_) => ModelKind::Trained,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            ScoreModel::Analytic(a) => a.mixture.dim(),
            ScoreModel::Trained(m) => m.arch.ambient_dim,
        }
    }

    /// Conditioning dimension; 0 for unconditional models.
    pub fn cond_dim(&self) -> usize {
        match self {
            ScoreModel::Analytic(a) if a.conditional => a.mixture.class_count(),
            ScoreModel::Analytic(_) => 0,
            ScoreModel::Trained(m) => m.arch.cond_dim,
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_dim() > 0
    }

    pub fn schedule(&self) -> &Schedule {
        match self {
            ScoreModel::Analytic(a) => a.mixture.schedule(),
            ScoreModel::Trained(m) => &m.schedule,
        }
    }

    pub fn as_trained(&self) -> Option<&TrainedModel> {
        match self {
            ScoreModel::Trained(m) => Some(m),
            ScoreModel::Analytic(_) => None,
        }
    }

    pub fn backing_spec(&self) -> Option<&ManifoldSpec> {
        match self {
            ScoreModel::Analytic(a) => Some(&a.spec),
            ScoreModel::Trained(_) => None,
        }
    }

    /// The null condition `∅` (zero vector) of this model.
    pub fn null_condition(&self) -> Vec<f64> {
        vec![0.0; self.cond_dim()]
    }

    /// Resolves an optional condition to a concrete vector (`∅` when absent).
    fn resolve_cond(&self, c: Option<&[f64]>) -> Result<Vec<f64>> {
        let m = self.cond_dim();
        match c {
            None => Ok(vec![0.0; m]),
            Some(_) if m == 0 => Err(Error::Unconditional),
            Some(c) if c.len() != m => Err(Error::DimensionMismatch {
                expected: m,
                got: c.len(),
            }),
            Some(c) => Ok(c.to_vec()),
        }
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ambient_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `s(x, t, c)`; `c = None` means `∅` for conditional models.
    pub fn eval_score(&self, x: &[f64], t: f64, c: Option<&[f64]>) -> Result<Vec<f64>> {
        check_open_time(t)?;
        self.check_x(x)?;
        let c = self.resolve_cond(c)?;
        match self {
            ScoreModel::Analytic(a) => {
                if !a.conditional {
                    return a.mixture.score(x, t, None);
                }
                let (uncond, per_class) = a.mixture.scores_all(x, t)?;
                Ok(combine(&uncond, &per_class, &c))
            }
            ScoreModel::Trained(m) => {
                let input = DMatrix::from_vec(m.arch.input_dim(), 1, m.input_column(x, t, &c));
                let cache = mlp::forward(&m.arch, &m.params, input);
                let sigma = m.schedule.sigma(t);
                Ok(cache.output().iter().map(|e| -e / sigma).collect())
            }
        }
    }

    /// Scores for every row of `xs` at a shared `(t, c)`.
    pub fn eval_batch(&self, xs: &Batch, t: f64, c: Option<&[f64]>) -> Result<Batch> {
        check_open_time(t)?;
        if xs.dim() != self.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ambient_dim(),
                got: xs.dim(),
            });
        }
        match self {
            ScoreModel::Analytic(_) => {
                let mut out = Vec::with_capacity(xs.rows() * xs.dim());
                for x in xs.iter_rows() {
                    out.extend(self.eval_score(x, t, c)?);
                }
                Batch::new(xs.rows(), xs.dim(), out)
            }
            ScoreModel::Trained(m) => {
                let c = self.resolve_cond(c)?;
                let n = xs.rows();
                let tf = mlp::time_features(t, m.arch.time_features);
                let input_dim = m.arch.input_dim();
                let mut data = Vec::with_capacity(input_dim * n);
                for x in xs.iter_rows() {
                    data.extend_from_slice(x);
                    data.extend_from_slice(&tf);
                    data.extend_from_slice(&c);
                }
                let cache = mlp::forward(&m.arch, &m.params, DMatrix::from_vec(input_dim, n, data));
                let sigma = m.schedule.sigma(t);
                let out: Vec<f64> = cache.output().iter().map(|e| -e / sigma).collect();
                Batch::new(n, xs.dim(), out)
            }
        }
    }

    /// Score and Jacobian–vector products `∇_x s · v` for each tangent `v`.
    pub fn score_jvp(
        &self,
        x: &[f64],
        t: f64,
        c: Option<&[f64]>,
        tangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        check_open_time(t)?;
        self.check_x(x)?;
        for v in tangents {
            self.check_x(v)?;
        }
        let c = self.resolve_cond(c)?;
        match self {
            ScoreModel::Analytic(a) => {
                if !a.conditional {
                    return a.mixture.score_jvp(x, t, None, tangents);
                }
                let (uncond, per_class) = a.mixture.scores_all(x, t)?;
                let score = combine(&uncond, &per_class, &c);
                let mut jvps = Vec::with_capacity(tangents.len());
                for v in tangents {
                    let (ju, jc) = a.mixture.jvp_all(x, t, v)?;
                    jvps.push(combine(&ju, &jc, &c));
                }
                Ok((score, jvps))
            }
            ScoreModel::Trained(m) => {
                let d = m.arch.ambient_dim;
                let input = DMatrix::from_vec(m.arch.input_dim(), 1, m.input_column(x, t, &c));
                let cache = mlp::forward(&m.arch, &m.params, input);
                let sigma = m.schedule.sigma(t);
                let score = cache.output().iter().map(|e| -e / sigma).collect();
                if tangents.is_empty() {
                    return Ok((score, Vec::new()));
                }
                let p = tangents.len();
                let tan = DMatrix::from_fn(m.arch.input_dim(), p, |i, j| if i < d { tangents[j][i] } else { 0.0 });
                let out = mlp::tangent_forward(&m.arch, &m.params, &cache, tan);
                let jvps = (0..p)
                    .map(|j| out.column(j).iter().map(|e| -e / sigma).collect())
                    .collect();
                Ok((score, jvps))
            }
        }
    }

    /// `tr ∇_x s(x, t, c)`, exactly or by Hutchinson's estimator.
    pub fn score_divergence(&self, x: &[f64], t: f64, c: Option<&[f64]>, mode: TraceMode) -> Result<f64> {
        Ok(self.score_and_divergence(x, t, c, mode)?.1)
    }

    /// Score together with its divergence from one forward pass.
    pub fn score_and_divergence(
        &self,
        x: &[f64],
        t: f64,
        c: Option<&[f64]>,
        mode: TraceMode,
    ) -> Result<(Vec<f64>, f64)> {
        let d = self.ambient_dim();
        match mode {
            TraceMode::Exact => {
                if let ScoreModel::Analytic(a) = self {
                    check_open_time(t)?;
                    self.check_x(x)?;
                    let c = self.resolve_cond(c)?;
                    if !a.conditional {
                        let e = a.mixture.eval_full(x, t, None)?;
                        let div = a.mixture.divergence(x, t, None)?;
                        return Ok((e.score, div));
                    }
                    let (u, per) = a.mixture.score_div_all(x, t)?;
                    let scores: Vec<Vec<f64>> = per.iter().map(|p| p.score.clone()).collect();
                    let divs: Vec<Vec<f64>> = per.iter().map(|p| vec![p.divergence]).collect();
                    let score = combine(&u.score, &scores, &c);
                    let div = combine(&[u.divergence], &divs, &c)[0];
                    return Ok((score, div));
                }
                let basis: Vec<Vec<f64>> = (0..d)
                    .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect();
                let (s, jv) = self.score_jvp(x, t, c, &basis)?;
                Ok((s, (0..d).map(|i| jv[i][i]).sum()))
            }
            TraceMode::Hutchinson { probes, seed } => {
                if probes == 0 {
                    return Err(Error::InvalidArgument(
                        "Hutchinson estimator needs at least one probe".into(),
                    ));
                }
                let mut r = rng::rng(seed);
                let vs: Vec<Vec<f64>> = (0..probes).map(|_| rng::rademacher_vec(&mut r, d)).collect();
                let (s, jv) = self.score_jvp(x, t, c, &vs)?;
                let est = vs.iter().zip(&jv).map(|(v, j)| dot(v, j)).sum::<f64>() / probes as f64;
                Ok((s, est))
            }
        }
    }
}

/// `(1 − Σc) u + Σ c_j p_j`.
fn combine(uncond: &[f64], per_class: &[Vec<f64>], c: &[f64]) -> Vec<f64> {
    let rest = 1.0 - c.iter().sum::<f64>();
    let mut out: Vec<f64> = uncond.iter().map(|u| rest * u).collect();
    for (cj, pj) in c.iter().zip(per_class) {
        if *cj == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(pj) {
            *o += cj * p;
        }
    }
    out
}

/// Records score evaluations as differentiable functions of the condition `c`.
///
/// Points `x` and times are constants; only `c` is a leaf. Build a scalar
/// objective from the returned variables with the [`Tape`] operations, then
/// call [`conditioning_gradient`].
pub struct CondTape<'m> {
    model: &'m ScoreModel,
    tape: Tape<'m>,
    cond: Var,
    cond_value: Vec<f64>,
    recorded: usize,
}

impl<'m> CondTape<'m> {
    pub fn new(model: &'m ScoreModel, c: &[f64]) -> Result<Self> {
        let m = model.cond_dim();
        if m == 0 {
            return Err(Error::Unconditional);
        }
        if c.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: c.len(),
            });
        }
        let mut tape = Tape::new();
        let cond = tape.leaf(c.to_vec());
        Ok(Self {
            model,
            tape,
            cond,
            cond_value: c.to_vec(),
            recorded: 0,
        })
    }

    pub fn tape(&mut self) -> &mut Tape<'m> {
        &mut self.tape
    }

    pub fn tape_ref(&self) -> &Tape<'m> {
        &self.tape
    }

    pub fn cond(&self) -> &[f64] {
        &self.cond_value
    }

    pub fn cond_var(&self) -> Var {
        self.cond
    }

    /// Number of score evaluations recorded so far.
    pub fn recorded(&self) -> usize {
        self.recorded
    }

    /// `s(x, t, c)` as a tape variable.
    pub fn score(&mut self, x: &[f64], t: f64) -> Result<Var> {
        Ok(self.score_jvp(x, t, &[])?.0)
    }

    /// `s(x, t, c)` and `∇_x s(x, t, c) · v` for each tangent, as tape variables.
    pub fn score_jvp(&mut self, x: &[f64], t: f64, tangents: &[Vec<f64>]) -> Result<(Var, Vec<Var>)> {
        check_open_time(t)?;
        self.model.check_x(x)?;
        self.recorded += 1;
        let model: &'m ScoreModel = self.model;
        match model {
            ScoreModel::Analytic(a) => {
                let (u, per) = a.mixture.scores_all(x, t)?;
                let s = self.affine_in_c(&u, &per);
                let mut jv = Vec::with_capacity(tangents.len());
                for v in tangents {
                    let (ju, jc) = a.mixture.jvp_all(x, t, v)?;
                    jv.push(self.affine_in_c(&ju, &jc));
                }
                Ok((s, jv))
            }
            ScoreModel::Trained(m) => Ok(self.trained_on_tape(m, x, t, tangents)),
        }
    }

    /// `u + Σ c_j (p_j − u)` with constant coefficients.
    fn affine_in_c(&mut self, u: &[f64], per_class: &[Vec<f64>]) -> Var {
        let d = u.len();
        let k = per_class.len();
        let mut data = Vec::with_capacity(d * k);
        for p in per_class {
            data.extend(p.iter().zip(u).map(|(a, b)| a - b));
        }
        let lin = self.tape.matvec(Mat::Owned { data, rows: d, cols: k }, self.cond);
        self.tape.offset(lin, u)
    }

    fn trained_on_tape(&mut self, m: &'m TrainedModel, x: &[f64], t: f64, tangents: &[Vec<f64>]) -> (Var, Vec<Var>) {
        let arch = &m.arch;
        let params: &'m [f64] = &m.params;
        let layout = arch.layout();
        let d = arch.ambient_dim;
        let fixed = d + 2 * arch.time_features;
        let first = layout[0];
        let w1 = first.weight(params);

        // constant part of the first layer: W[:, :fixed] [x; τ(t)] + b
        let mut fixed_in = x.to_vec();
        fixed_in.extend(mlp::time_features(t, arch.time_features));
        let mut z_const: Vec<f64> = first.bias(params).to_vec();
        for (j, v) in fixed_in.iter().enumerate() {
            for (i, z) in z_const.iter_mut().enumerate() {
                *z += w1[(i, j)] * v;
            }
        }
        let c_block = &params[first.w + fixed * first.rows..first.w + first.rows * first.cols];
        let zc = self.tape.matvec(
            Mat::Borrowed {
                data: c_block,
                rows: first.rows,
                cols: arch.cond_dim,
            },
            self.cond,
        );
        let mut z = self.tape.offset(zc, &z_const);

        // first-layer tangents are constant: W[:, :d] v
        let mut tz: Vec<Var> = tangents
            .iter()
            .map(|v| {
                let mut out = vec![0.0; first.rows];
                for (j, vj) in v.iter().enumerate() {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += w1[(i, j)] * vj;
                    }
                }
                self.tape.constant(out)
            })
            .collect();
        let mut first_layer = true;

        for l in layout.iter().skip(1) {
            let a = self.tape.silu(z);
            let sp = self.tape.silu_prime(z);
            let w = Mat::Borrowed {
                data: &params[l.w..l.w + l.rows * l.cols],
                rows: l.rows,
                cols: l.cols,
            };
            let next = self.tape.matvec(w.clone(), a);
            z = self.tape.offset(next, l.bias(params));
            for tv in tz.iter_mut() {
                let ta = if first_layer {
                    let c = self.tape.value(*tv).to_vec();
                    self.tape.mul_const(sp, c)
                } else {
                    self.tape.mul(sp, *tv)
                };
                *tv = self.tape.matvec(w.clone(), ta);
            }
            first_layer = false;
        }
        let sigma = m.schedule.sigma(t);
        let score = self.tape.scale(z, -1.0 / sigma);
        let jvps = tz.into_iter().map(|v| self.tape.scale(v, -1.0 / sigma)).collect();
        (score, jvps)
    }
}

/// Gradient of a recorded scalar objective with respect to the condition.
pub fn conditioning_gradient(model: &ScoreModel, recorder: &CondTape<'_>, objective: Var) -> Result<Vec<f64>> {
    if !model.is_conditional() {
        return Err(Error::Unconditional);
    }
    if !std::ptr::eq(model, recorder.model) {
        return Err(Error::InvalidArgument(
            "objective was recorded against a different model".into(),
        ));
    }
    if recorder.recorded == 0 {
        return Err(Error::InvalidArgument(
            "empty tape: no score evaluation was recorded".into(),
        ));
    }
    let g = recorder.tape.gradient(objective, recorder.cond)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conditioning gradient".into()));
    }
    Ok(g)
}
