use nalgebra::DMatrix;

use super::threshold::{count_above, SingularThreshold};
use super::{EstimateConfig, Estimator, LidEstimate};
use crate::batch::Batch;
use crate::diffusion::{time_grid, GuidanceConfig};
use crate::error::{Error, Result};
use crate::scorenet::ScoreModel;

/// A map `G: R^{d'} → R^d` with directional derivatives.
pub trait Generator {
    fn latent_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn generate(&self, z: &[f64]) -> Result<Vec<f64>>;
    /// `∇G(z) v`.
    fn jvp(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    /// `∇G(z)` as a `d × d'` matrix.
    fn jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let (n, m) = (self.output_dim(), self.latent_dim());
        let mut j = DMatrix::zeros(n, m);
        let mut e = vec![0.0; m];
        for c in 0..m {
            e[c] = 1.0;
            let col = self.jvp(z, &e)?;
            e[c] = 0.0;
            j.column_mut(c).copy_from_slice(&col);
        }
        Ok(j)
    }
}

/// `G(z) = A z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGenerator {
    pub a: DMatrix<f64>,
}

impl LinearGenerator {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let b = Batch::from_rows(rows)?;
        Ok(Self {
            a: DMatrix::from_row_slice(b.rows(), b.dim(), b.as_slice()),
        })
    }
}

impl Generator for LinearGenerator {
    fn latent_dim(&self) -> usize {
        self.a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn generate(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.jvp(z, z)
    }

    fn jvp(&self, _z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                got: v.len(),
            });
        }
        Ok((&self.a * nalgebra::DVector::from_column_slice(v))
            .iter()
            .copied()
            .collect())
    }
}

/// The deterministic DDIM map from terminal noise to a sample, with exact
/// tangents propagated through each Euler step.
#[derive(Debug, Clone)]
pub struct FlowDecoder<'m> {
    pub model: &'m ScoreModel,
    pub steps: usize,
    pub t_min: f64,
    pub cond: Option<Vec<f64>>,
    pub guidance: Option<GuidanceConfig>,
}

impl<'m> FlowDecoder<'m> {
    pub fn new(model: &'m ScoreModel, steps: usize, t_min: f64) -> Self {
        Self {
            model,
            steps,
            t_min,
            cond: None,
            guidance: None,
        }
    }

    fn score_jvp(&self, x: &[f64], t: f64, tangents: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let c = self.cond.as_deref();
        match (c, self.guidance) {
            (Some(c), Some(g)) if g.lambda != 1.0 => {
                let (sn, jn) = self.model.score_jvp(x, t, None, tangents)?;
                let (sc, jc) = self.model.score_jvp(x, t, Some(c), tangents)?;
                let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
                    a.iter().zip(b).map(|(n, c)| n + g.lambda * (c - n)).collect()
                };
                let j = jn.iter().zip(&jc).map(|(a, b)| mix(a, b)).collect();
                Ok((mix(&sn, &sc), j))
            }
            _ => self.model.score_jvp(x, t, c, tangents),
        }
    }

    /// Runs the map, carrying the given tangents along.
    fn run(&self, z: &[f64], mut tangents: Vec<Vec<f64>>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        let sched = *self.model.schedule();
        let mut x = z.to_vec();
        for w in time_grid(self.steps, self.t_min).windows(2) {
            let (t, s) = (w[0], w[1]);
            let (s_score, jv) = self.score_jvp(&x, t, &tangents)?;
            let (psi_t, psi_s) = (sched.psi(t), sched.psi(s));
            let coef = (sched.sigma_tilde(s) - sched.sigma_tilde(t)) * sched.sigma_tilde(t) * psi_t;
            for (xi, si) in x.iter_mut().zip(&s_score) {
                *xi = psi_s * (*xi / psi_t - coef * si);
            }
            for (v, j) in tangents.iter_mut().zip(&jv) {
                for (vi, ji) in v.iter_mut().zip(j) {
                    *vi = psi_s * (*vi / psi_t - coef * ji);
                }
            }
        }
        Ok((x, tangents))
    }
}

impl Generator for FlowDecoder<'_> {
    fn latent_dim(&self) -> usize {
        self.model.ambient_dim()
    }

    fn output_dim(&self) -> usize {
        self.model.ambient_dim()
    }

    fn generate(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(z, Vec::new())?.0)
    }

    fn jvp(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(z, vec![v.to_vec()])?.1.remove(0))
    }

    fn jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.latent_dim();
        let basis = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let (_, cols) = self.run(z, basis)?;
        Ok(DMatrix::from_fn(d, d, |r, c| cols[c][r]))
    }
}

/// Singular values of `∇G(z)`, decreasing.
pub fn jacobian_singular_values<G: Generator + ?Sized>(generator: &G, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != generator.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: generator.latent_dim(),
            got: z.len(),
        });
    }
    let j = generator.jacobian(z)?;
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator Jacobian".into()));
    }
    let mut sv: Vec<f64> = j.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

fn estimate(rank: usize, cutoff: f64) -> LidEstimate {
    LidEstimate {
        value: rank as f64,
        estimator: Estimator::Jacobian,
        t0: None,
        cond: None,
        config: EstimateConfig {
            threshold: Some(cutoff),
            ..EstimateConfig::default()
        },
        degenerate: false,
    }
}

/// Numerical rank of `∇G(z)`. A cohort rule degenerates to a cohort of one.
pub fn decoder_jacobian_lid<G: Generator + ?Sized>(
    generator: &G,
    z: &[f64],
    threshold: SingularThreshold,
) -> Result<LidEstimate> {
    threshold.validate()?;
    let sv = jacobian_singular_values(generator, z)?;
    let cutoff = threshold.cutoff(&sv, &sv, None)?;
    Ok(estimate(count_above(&sv, cutoff), cutoff))
}

/// Jacobian-rank estimates for a cohort of latents (one per row of `zs`),
/// with cohort thresholds pooled over all their spectra.
pub fn decoder_jacobian_lid_cohort<G: Generator + ?Sized>(
    generator: &G,
    zs: &Batch,
    threshold: SingularThreshold,
) -> Result<Vec<LidEstimate>> {
    threshold.validate()?;
    let spectra = zs
        .iter_rows()
        .map(|z| jacobian_singular_values(generator, z))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<f64> = spectra.iter().flatten().copied().collect();
    spectra
        .iter()
        .map(|sv| {
            let cutoff = threshold.cutoff(sv, &pooled, None)?;
            Ok(estimate(count_above(sv, cutoff), cutoff))
        })
        .collect()
}
