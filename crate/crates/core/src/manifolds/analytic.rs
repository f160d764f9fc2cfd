//! Closed-form scores of noised Gaussian mixtures.
//!
//! Component `k` noised to time `t` is `N(ψμ_k, ψ²Σ_k + σ²I)`. With
//! `Σ_k = U Λ Uᵀ` the precision is `U diag(1/(ψ²λ + σ²)) Uᵀ`, so every
//! quantity below is evaluated in the eigenbasis.

use std::f64::consts::PI;

use super::spec::{ComponentKind, GaussianFactor, ManifoldSpec, PreparedComponent};
use crate::batch::{dot, norm_sq};
use crate::diffusion::schedule::{check_open_time, Schedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GaussianMixtureScore {
    dim: usize,
    ln_weights: Vec<f64>,
    factors: Vec<GaussianFactor>,
    /// Component indices per class (empty when the spec is unlabeled).
    classes: Vec<Vec<usize>>,
    schedule: Schedule,
}

/// Per-component quantities at one `(y, t)`.
struct ComponentTerm {
    ln_density: f64,
    score: Vec<f64>,
    /// Noised eigenvalues `ψ²λᵢ + σ²`.
    noised: Vec<f64>,
}

/// Mixture score with what is needed for its Jacobian.
pub(crate) struct MixtureEval {
    pub score: Vec<f64>,
    pub ln_density: f64,
    resp: Vec<(usize, f64)>,
}

impl GaussianMixtureScore {
    pub fn new(spec: &ManifoldSpec, schedule: Schedule) -> Result<Self> {
        if spec.has_circle() {
            return Err(Error::NoClosedForm(
                "von Mises components have no closed-form noised score".into(),
            ));
        }
        let prepared = spec.prepare()?;
        let factors = prepared
            .into_iter()
            .map(|p| match p {
                PreparedComponent::Gaussian(g) => g,
                PreparedComponent::Circle { .. } => unreachable!("checked above"),
            })
            .collect();
        let classes = match spec.class_count() {
            Some(k) => (0..k)
                .map(|c| {
                    spec.components
                        .iter()
                        .enumerate()
                        .filter(|(_, comp)| comp.class_label == Some(c))
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(Self {
            dim: spec.ambient_dim,
            ln_weights: spec.components.iter().map(|c| c.weight.ln()).collect(),
            factors,
            classes,
            schedule,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn terms(&self, y: &[f64], t: f64) -> Vec<ComponentTerm> {
        let psi = self.schedule.psi(t);
        let s2 = self.schedule.sigma_sq(t);
        let d = self.dim;
        self.factors
            .iter()
            .map(|g| {
                let diff: Vec<f64> = y.iter().zip(&g.mean).map(|(a, m)| a - psi * m).collect();
                let noised: Vec<f64> = g.eigvals.iter().map(|l| psi * psi * l + s2).collect();
                // coordinates in the eigenbasis
                let coords: Vec<f64> = (0..d)
                    .map(|k| g.eigvecs.column(k).iter().zip(&diff).map(|(u, v)| u * v).sum())
                    .collect();
                let mut quad = 0.0;
                let mut ln_det = 0.0;
                let mut score = vec![0.0; d];
                for k in 0..d {
                    let w = coords[k] / noised[k];
                    quad += coords[k] * w;
                    ln_det += noised[k].ln();
                    for (i, s) in score.iter_mut().enumerate() {
                        *s -= g.eigvecs[(i, k)] * w;
                    }
                }
                ComponentTerm {
                    ln_density: -0.5 * (d as f64 * (2.0 * PI).ln() + ln_det + quad),
                    score,
                    noised,
                }
            })
            .collect()
    }

    fn members(&self, class: Option<usize>) -> Result<Vec<usize>> {
        match class {
            None => Ok((0..self.factors.len()).collect()),
            Some(c) => self
                .classes
                .get(c)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("unknown class {c}"))),
        }
    }

    fn mix(&self, terms: &[ComponentTerm], members: &[usize]) -> MixtureEval {
        let logits: Vec<f64> = members
            .iter()
            .map(|&k| self.ln_weights[k] + terms[k].ln_density)
            .collect();
        let lw_total: f64 = log_sum_exp(&members.iter().map(|&k| self.ln_weights[k]).collect::<Vec<_>>());
        let lse = log_sum_exp(&logits);
        let mut score = vec![0.0; self.dim];
        let mut resp = Vec::with_capacity(members.len());
        for (&k, l) in members.iter().zip(&logits) {
            let r = (l - lse).exp();
            if r > 0.0 {
                for (s, v) in score.iter_mut().zip(&terms[k].score) {
                    *s += r * v;
                }
            }
            resp.push((k, r));
        }
        MixtureEval {
            score,
            ln_density: lse - lw_total,
            resp,
        }
    }

    pub(crate) fn eval_full(&self, y: &[f64], t: f64, class: Option<usize>) -> Result<MixtureEval> {
        self.check(y, t)?;
        let terms = self.terms(y, t);
        Ok(self.mix(&terms, &self.members(class)?))
    }

    fn check(&self, y: &[f64], t: f64) -> Result<()> {
        check_open_time(t)?;
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        Ok(())
    }

    /// Score `∇_y log p_t(y)` of the (optionally class-restricted) mixture.
    pub fn score(&self, y: &[f64], t: f64, class: Option<usize>) -> Result<Vec<f64>> {
        Ok(self.eval_full(y, t, class)?.score)
    }

    /// Log density of the noised (optionally class-restricted) mixture.
    pub fn ln_density(&self, y: &[f64], t: f64, class: Option<usize>) -> Result<f64> {
        Ok(self.eval_full(y, t, class)?.ln_density)
    }

    /// Score for every class and for the unrestricted mixture in one pass.
    /// Returns `(unconditional, per_class)`.
    pub fn scores_all(&self, y: &[f64], t: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check(y, t)?;
        let terms = self.terms(y, t);
        let all: Vec<usize> = (0..self.factors.len()).collect();
        let uncond = self.mix(&terms, &all).score;
        let per_class = self.classes.iter().map(|m| self.mix(&terms, m).score).collect();
        Ok((uncond, per_class))
    }

    /// Score and the Jacobian–vector products `∇s · v` for every tangent.
    ///
    /// `∇s = Σ r_k(−C_k⁻¹) + Σ r_k s_k s_kᵀ − s sᵀ`.
    pub fn score_jvp(
        &self,
        y: &[f64],
        t: f64,
        class: Option<usize>,
        tangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check(y, t)?;
        let terms = self.terms(y, t);
        let eval = self.mix(&terms, &self.members(class)?);
        let jvps = tangents.iter().map(|v| self.jvp_from(&terms, &eval, v)).collect();
        Ok((eval.score, jvps))
    }

    fn jvp_from(&self, terms: &[ComponentTerm], eval: &MixtureEval, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for &(k, r) in &eval.resp {
            if r == 0.0 {
                continue;
            }
            let g = &self.factors[k];
            let term = &terms[k];
            for j in 0..d {
                let u = g.eigvecs.column(j);
                let c: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / term.noised[j];
                for (o, ui) in out.iter_mut().zip(u.iter()) {
                    *o -= r * c * ui;
                }
            }
            let sv = dot(&term.score, v);
            for (o, s) in out.iter_mut().zip(&term.score) {
                *o += r * sv * s;
            }
        }
        let sv = dot(&eval.score, v);
        for (o, s) in out.iter_mut().zip(&eval.score) {
            *o -= sv * s;
        }
        out
    }

    /// Exact `tr ∇s = Σ r_k(−tr C_k⁻¹ + ‖s_k‖²) − ‖s‖²`.
    pub fn divergence(&self, y: &[f64], t: f64, class: Option<usize>) -> Result<f64> {
        self.check(y, t)?;
        let terms = self.terms(y, t);
        let eval = self.mix(&terms, &self.members(class)?);
        Ok(self.divergence_from(&terms, &eval))
    }

    fn divergence_from(&self, terms: &[ComponentTerm], eval: &MixtureEval) -> f64 {
        let mut tr = 0.0;
        for &(k, r) in &eval.resp {
            if r == 0.0 {
                continue;
            }
            let term = &terms[k];
            let prec: f64 = term.noised.iter().map(|n| 1.0 / n).sum();
            tr += r * (norm_sq(&term.score) - prec);
        }
        tr - norm_sq(&eval.score)
    }

    /// Score plus exact divergence for every class and the unrestricted mixture.
    pub(crate) fn score_div_all(&self, y: &[f64], t: f64) -> Result<(ScoreDiv, Vec<ScoreDiv>)> {
        self.check(y, t)?;
        let terms = self.terms(y, t);
        let all: Vec<usize> = (0..self.factors.len()).collect();
        let e = self.mix(&terms, &all);
        let uncond = ScoreDiv {
            divergence: self.divergence_from(&terms, &e),
            score: e.score,
        };
        let per_class = self
            .classes
            .iter()
            .map(|m| {
                let e = self.mix(&terms, m);
                ScoreDiv {
                    divergence: self.divergence_from(&terms, &e),
                    score: e.score,
                }
            })
            .collect();
        Ok((uncond, per_class))
    }

    /// Jacobian–vector products for every class and the unrestricted mixture.
    pub(crate) fn jvp_all(&self, y: &[f64], t: f64, v: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check(y, t)?;
        let terms = self.terms(y, t);
        let all: Vec<usize> = (0..self.factors.len()).collect();
        let e = self.mix(&terms, &all);
        let uncond = self.jvp_from(&terms, &e, v);
        let per_class = self
            .classes
            .iter()
            .map(|m| {
                let e = self.mix(&terms, m);
                self.jvp_from(&terms, &e, v)
            })
            .collect();
        Ok((uncond, per_class))
    }
}

pub(crate) struct ScoreDiv {
    pub score: Vec<f64>,
    pub divergence: f64,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact score of the noised mixture at `(x, t)`, restricted to `class` when given.
pub fn analytic_score(
    spec: &ManifoldSpec,
    schedule: &Schedule,
    x: &[f64],
    t: f64,
    class: Option<usize>,
) -> Result<Vec<f64>> {
    check_open_time(t)?;
    if spec
        .components
        .iter()
        .any(|c| matches!(c.kind, ComponentKind::VonMisesCircle { .. }))
    {
        return Err(Error::NoClosedForm(
            "von Mises components have no closed-form noised score".into(),
        ));
    }
    GaussianMixtureScore::new(spec, *schedule)?.score(x, t, class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifolds::spec::{Component, ComponentKind};

    fn two_atoms() -> ManifoldSpec {
        ManifoldSpec::new(
            2,
            vec![
                Component::new(
                    0.5,
                    ComponentKind::PointMass {
                        location: vec![1.0, 0.5],
                    },
                )
                .with_class(0),
                Component::new(
                    0.5,
                    ComponentKind::PointMass {
                        location: vec![-1.0, -0.5],
                    },
                )
                .with_class(1),
            ],
        )
        .unwrap()
    }

    /// Log density of the noised mixture written out directly from the
    /// definition of each Gaussian (dense inverse, no eigenbasis).
    fn ln_density_oracle(spec: &ManifoldSpec, s: &Schedule, y: &[f64], t: f64) -> f64 {
        let d = spec.ambient_dim;
        let psi = s.psi(t);
        let s2 = s.sigma_sq(t);
        let mut total = 0.0;
        for c in &spec.components {
            let (mean, cov) = match &c.kind {
                ComponentKind::PointMass { location } => (location.clone(), vec![vec![0.0; d]; d]),
                ComponentKind::AffineGaussian { mean, covariance, .. } => (mean.clone(), covariance.clone()),
                _ => unreachable!(),
            };
            let m = nalgebra::DMatrix::from_fn(d, d, |i, j| psi * psi * cov[i][j] + if i == j { s2 } else { 0.0 });
            let inv = m.clone().try_inverse().unwrap();
            let diff = nalgebra::DVector::from_fn(d, |i, _| y[i] - psi * mean[i]);
            let quad = (diff.transpose() * &inv * &diff)[(0, 0)];
            let dens = (-0.5 * quad).exp() / ((2.0 * PI).powi(d as i32) * m.determinant()).sqrt();
            total += c.weight * dens;
        }
        total.ln()
    }

    #[test]
    fn single_point_mass_score() {
        let s = Schedule::default();
        let x0 = vec![0.3, -0.7];
        let spec = ManifoldSpec::point_mass(x0.clone());
        let y = [0.1, 0.2];
        let t = 0.3;
        let got = analytic_score(&spec, &s, &y, t, None).unwrap();
        for i in 0..2 {
            let want = -(y[i] - s.psi(t) * x0[i]) / s.sigma_sq(t);
            assert!((got[i] - want).abs() <= 1e-14 * want.abs().max(1.0));
        }
    }

    #[test]
    fn standard_gaussian_score() {
        let s = Schedule::default();
        let spec = ManifoldSpec::standard_gaussian(3);
        let y = [0.4, -1.0, 2.0];
        let t = 0.2;
        let got = analytic_score(&spec, &s, &y, t, None).unwrap();
        let denom = s.psi(t).powi(2) + s.sigma_sq(t);
        for i in 0..3 {
            assert!((got[i] + y[i] / denom).abs() < 1e-13);
        }
    }

    #[test]
    fn two_atom_score_matches_finite_differences() {
        let s = Schedule::default();
        let spec = two_atoms();
        let y = [0.2, 0.1];
        for &t in &[0.05, 0.3, 0.9] {
            let got = analytic_score(&spec, &s, &y, t, None).unwrap();
            let h = 1e-5;
            for i in 0..2 {
                let mut p = y;
                let mut m = y;
                p[i] += h;
                m[i] -= h;
                let fd = (ln_density_oracle(&spec, &s, &p, t) - ln_density_oracle(&spec, &s, &m, t)) / (2.0 * h);
                assert!(
                    (got[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                    "t={t} i={i} {} vs {fd}",
                    got[i]
                );
            }
        }
    }

    #[test]
    fn class_restriction_is_the_single_component_score() {
        let s = Schedule::default();
        let spec = two_atoms();
        let y = [0.2, 0.1];
        let restricted = analytic_score(&spec, &s, &y, 0.4, Some(1)).unwrap();
        let single = analytic_score(&ManifoldSpec::point_mass(vec![-1.0, -0.5]), &s, &y, 0.4, None).unwrap();
        assert_eq!(restricted, single);
    }

    #[test]
    fn circles_have_no_closed_form() {
        let spec = ManifoldSpec::von_mises_mixture(1.0, 4.0, 0.2).unwrap();
        let err = analytic_score(&spec, &Schedule::default(), &[0.0, 0.0], 0.5, None).unwrap_err();
        assert!(matches!(err, Error::NoClosedForm(_)));
    }

    #[test]
    fn rejects_bad_times() {
        let spec = ManifoldSpec::point_mass(vec![0.0]);
        assert!(analytic_score(&spec, &Schedule::default(), &[0.0], 1.5, None).is_err());
        assert!(analytic_score(&spec, &Schedule::default(), &[0.0], 0.0, None).is_err());
    }

    #[test]
    fn jvp_and_divergence_match_finite_differences_of_the_score() {
        let s = Schedule::default();
        let mut spec = ManifoldSpec::linear_gaussian(3, 1, vec![0.2, 0.0, -0.1], 8).unwrap();
        spec.components[0].weight = 0.6;
        spec.components.push(Component::new(
            0.4,
            ComponentKind::PointMass {
                location: vec![0.5, 0.5, 0.5],
            },
        ));
        let m = GaussianMixtureScore::new(&spec, s).unwrap();
        let y = [0.3, 0.2, 0.1];
        let t = 0.1;
        let basis: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect())
            .collect();
        let (_, jv) = m.score_jvp(&y, t, None, &basis).unwrap();
        let h = 1e-6;
        let mut fd_trace = 0.0;
        for i in 0..3 {
            let mut p = y;
            let mut q = y;
            p[i] += h;
            q[i] -= h;
            let sp = m.score(&p, t, None).unwrap();
            let sq = m.score(&q, t, None).unwrap();
            for k in 0..3 {
                let fd = (sp[k] - sq[k]) / (2.0 * h);
                assert!((jv[i][k] - fd).abs() <= 1e-5 * fd.abs().max(1.0));
            }
            fd_trace += (sp[i] - sq[i]) / (2.0 * h);
        }
        let div = m.divergence(&y, t, None).unwrap();
        assert!((div - fd_trace).abs() <= 1e-3 * fd_trace.abs());
    }
}
