use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::batch::{dot, norm_sq};
use crate::error::{Error, Result};
use crate::rng;

/// Current on-disk schema version of manifold spec files.
pub const SPEC_SCHEMA_VERSION: u32 = 1;

/// Default support-membership tolerance (absolute, ambient norm).
pub const DEFAULT_SUPPORT_TOL: f64 = 1e-6;

/// A synthetic ground-truth distribution: a finite mixture of components with
/// known intrinsic dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub ambient_dim: usize,
    pub components: Vec<Component>,
}

fn default_schema() -> u32 {
    SPEC_SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<usize>,
    #[serde(flatten)]
    pub kind: ComponentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentKind {
    /// `N(mean, covariance)` with a possibly singular covariance of the
    /// declared rank; its support is the affine subspace `mean + range(Σ)`.
    AffineGaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
        intrinsic_dim: usize,
    },
    PointMass {
        location: Vec<f64>,
    },
    /// Von Mises distribution on a circle embedded in the plane spanned by two
    /// orthonormal axes (the first two coordinate axes when omitted).
    VonMisesCircle {
        center: Vec<f64>,
        radius: f64,
        mean_angle: f64,
        concentration: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        axes: Option<[Vec<f64>; 2]>,
    },
}

impl ComponentKind {
    pub fn intrinsic_dim(&self) -> usize {
        match self {
            ComponentKind::AffineGaussian { intrinsic_dim, .. } => *intrinsic_dim,
            ComponentKind::PointMass { .. } => 0,
            ComponentKind::VonMisesCircle { .. } => 1,
        }
    }

    /// Gaussian with covariance `Σᵢ sᵢ² bᵢ bᵢᵀ`; the rank is the number of
    /// nonzero scales.
    pub fn gaussian_from_basis(mean: Vec<f64>, basis: &[Vec<f64>], scales: &[f64]) -> Self {
        let d = mean.len();
        let mut cov = vec![vec![0.0; d]; d];
        for (b, s) in basis.iter().zip(scales) {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += s * s * b[i] * b[j];
                }
            }
        }
        let rank = scales.iter().filter(|s| **s != 0.0).count();
        ComponentKind::AffineGaussian {
            mean,
            covariance: cov,
            intrinsic_dim: rank,
        }
    }
}

impl Component {
    pub fn new(weight: f64, kind: ComponentKind) -> Self {
        Self {
            weight,
            class_label: None,
            kind,
        }
    }

    pub fn with_class(mut self, label: usize) -> Self {
        self.class_label = Some(label);
        self
    }
}

/// Eigen-decomposed Gaussian component, shared by the sampler, the LID oracle
/// and the closed-form scores.
#[derive(Debug, Clone)]
pub(crate) struct GaussianFactor {
    pub mean: Vec<f64>,
    /// Columns are orthonormal eigenvectors of the covariance.
    pub eigvecs: DMatrix<f64>,
    pub eigvals: Vec<f64>,
    /// Indices of eigenvalues treated as nonzero (the tangent directions).
    pub support: Vec<usize>,
}

impl GaussianFactor {
    pub fn point(location: &[f64]) -> Self {
        let d = location.len();
        Self {
            mean: location.to_vec(),
            eigvecs: DMatrix::identity(d, d),
            eigvals: vec![0.0; d],
            support: Vec::new(),
        }
    }

    pub fn from_covariance(mean: &[f64], cov: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidSpec("covariance is not symmetric".into()));
                }
            }
        }
        let eig = SymmetricEigen::new(m);
        let mut eigvals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let lmax = eigvals.iter().fold(0.0f64, |a, v| a.max(*v));
        let tol = 1e-10 * lmax.max(1.0);
        if eigvals.iter().any(|v| *v < -tol) {
            return Err(Error::InvalidSpec("covariance is not positive semidefinite".into()));
        }
        let mut support = Vec::new();
        for (i, v) in eigvals.iter_mut().enumerate() {
            if *v > tol {
                support.push(i);
            } else {
                *v = 0.0;
            }
        }
        Ok(Self {
            mean: mean.to_vec(),
            eigvecs: eig.eigenvectors,
            eigvals,
            support,
        })
    }

    /// Distance from `x` to the affine support `mean + span(tangent eigvecs)`.
    pub fn support_distance(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut resid = norm_sq(&diff);
        for &k in &self.support {
            let u = self.eigvecs.column(k);
            let c: f64 = u.iter().zip(&diff).map(|(a, b)| a * b).sum();
            resid -= c * c;
        }
        resid.max(0.0).sqrt()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CircleFrame {
    pub center: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub radius: f64,
}

impl CircleFrame {
    pub fn point(&self, theta: f64) -> Vec<f64> {
        let (s, c) = theta.sin_cos();
        self.center
            .iter()
            .zip(self.u.iter().zip(&self.v))
            .map(|(o, (a, b))| o + self.radius * (c * a + s * b))
            .collect()
    }

    pub fn support_distance(&self, x: &[f64]) -> f64 {
        let p: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let a = dot(&p, &self.u);
        let b = dot(&p, &self.v);
        let off_plane = (norm_sq(&p) - a * a - b * b).max(0.0);
        let in_plane = (a * a + b * b).sqrt() - self.radius;
        (in_plane * in_plane + off_plane).sqrt()
    }
}

/// A validated component ready for sampling and support queries.
#[derive(Debug, Clone)]
pub(crate) enum PreparedComponent {
    Gaussian(GaussianFactor),
    Circle {
        frame: CircleFrame,
        mean_angle: f64,
        concentration: f64,
    },
}

impl PreparedComponent {
    pub fn support_distance(&self, x: &[f64]) -> f64 {
        match self {
            PreparedComponent::Gaussian(g) => g.support_distance(x),
            PreparedComponent::Circle { frame, .. } => frame.support_distance(x),
        }
    }
}

impl ManifoldSpec {
    pub fn new(ambient_dim: usize, components: Vec<Component>) -> Result<Self> {
        let spec = Self {
            schema: SPEC_SCHEMA_VERSION,
            ambient_dim,
            components,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A single point mass.
    pub fn point_mass(location: Vec<f64>) -> Self {
        Self {
            schema: SPEC_SCHEMA_VERSION,
            ambient_dim: location.len(),
            components: vec![Component::new(1.0, ComponentKind::PointMass { location })],
        }
    }

    /// Standard Gaussian `N(0, I_d)`.
    pub fn standard_gaussian(d: usize) -> Self {
        let basis: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            schema: SPEC_SCHEMA_VERSION,
            ambient_dim: d,
            components: vec![Component::new(
                1.0,
                ComponentKind::gaussian_from_basis(vec![0.0; d], &basis, &vec![1.0; d]),
            )],
        }
    }

    /// Rank-`r` Gaussian in `R^d` with unit variance along a seeded random
    /// `r`-dimensional subspace through `mean`.
    pub fn linear_gaussian(d: usize, r: usize, mean: Vec<f64>, seed: u64) -> Result<Self> {
        if r > d || mean.len() != d {
            return Err(Error::InvalidSpec(format!(
                "rank {r} Gaussian needs r <= d = {d} and a {d}-dim mean"
            )));
        }
        let basis = random_orthonormal(d, r, seed);
        Self::new(
            d,
            vec![Component::new(
                1.0,
                ComponentKind::gaussian_from_basis(mean, &basis, &vec![1.0; r]),
            )],
        )
    }

    /// Mixture of a von Mises circle and a point mass at its center in `R^2`.
    pub fn von_mises_mixture(radius: f64, concentration: f64, atom_weight: f64) -> Result<Self> {
        Self::new(
            2,
            vec![
                Component::new(
                    1.0 - atom_weight,
                    ComponentKind::VonMisesCircle {
                        center: vec![0.0, 0.0],
                        radius,
                        mean_angle: 0.0,
                        concentration,
                        axes: None,
                    },
                ),
                Component::new(
                    atom_weight,
                    ComponentKind::PointMass {
                        location: vec![0.0, 0.0],
                    },
                ),
            ],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.ambient_dim;
        if d == 0 {
            return Err(Error::InvalidSpec("ambient_dim must be positive".into()));
        }
        if self.components.is_empty() {
            return Err(Error::InvalidSpec("no components".into()));
        }
        let mut total = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "component {i}: weight {} outside (0, 1]",
                    c.weight
                )));
            }
            total += c.weight;
            self.prepare_component(i)?;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("weights sum to {total}, not 1")));
        }
        let labeled = self.components.iter().filter(|c| c.class_label.is_some()).count();
        if labeled != 0 && labeled != self.components.len() {
            return Err(Error::InvalidSpec(
                "class labels must be given for all components or none".into(),
            ));
        }
        if let Some(k) = self.class_count() {
            for class in 0..k {
                if !self.components.iter().any(|c| c.class_label == Some(class)) {
                    return Err(Error::InvalidSpec(format!("class {class} has no component")));
                }
            }
        }
        Ok(())
    }

    /// Number of classes when the spec is class-labeled.
    pub fn class_count(&self) -> Option<usize> {
        self.components
            .iter()
            .filter_map(|c| c.class_label)
            .max()
            .map(|m| m + 1)
    }

    pub fn has_circle(&self) -> bool {
        self.components
            .iter()
            .any(|c| matches!(c.kind, ComponentKind::VonMisesCircle { .. }))
    }

    pub(crate) fn prepare_component(&self, i: usize) -> Result<PreparedComponent> {
        let d = self.ambient_dim;
        let c = &self.components[i];
        let check_len = |name: &str, len: usize| {
            if len != d {
                Err(Error::InvalidSpec(format!(
                    "component {i}: {name} has length {len}, ambient_dim is {d}"
                )))
            } else {
                Ok(())
            }
        };
        match &c.kind {
            ComponentKind::AffineGaussian {
                mean,
                covariance,
                intrinsic_dim,
            } => {
                check_len("mean", mean.len())?;
                check_len("covariance", covariance.len())?;
                for row in covariance {
                    check_len("covariance row", row.len())?;
                }
                let g = GaussianFactor::from_covariance(mean, covariance)
                    .map_err(|e| Error::InvalidSpec(format!("component {i}: {e}")))?;
                if g.support.len() != *intrinsic_dim {
                    return Err(Error::InvalidSpec(format!(
                        "component {i}: covariance rank {} differs from declared intrinsic_dim {}",
                        g.support.len(),
                        intrinsic_dim
                    )));
                }
                Ok(PreparedComponent::Gaussian(g))
            }
            ComponentKind::PointMass { location } => {
                check_len("location", location.len())?;
                Ok(PreparedComponent::Gaussian(GaussianFactor::point(location)))
            }
            ComponentKind::VonMisesCircle {
                center,
                radius,
                mean_angle,
                concentration,
                axes,
            } => {
                if d < 2 {
                    return Err(Error::InvalidSpec("von Mises circle needs ambient_dim >= 2".into()));
                }
                check_len("center", center.len())?;
                if radius.is_nan()
                    || *radius <= 0.0
                    || concentration.is_nan()
                    || *concentration < 0.0
                    || !mean_angle.is_finite()
                {
                    return Err(Error::InvalidSpec(format!(
                        "component {i}: circle needs radius > 0 and concentration >= 0"
                    )));
                }
                let (u, v) = match axes {
                    Some([u, v]) => {
                        check_len("axis", u.len())?;
                        check_len("axis", v.len())?;
                        let ortho = (norm_sq(u) - 1.0).abs() < 1e-9
                            && (norm_sq(v) - 1.0).abs() < 1e-9
                            && dot(u, v).abs() < 1e-9;
                        if !ortho {
                            return Err(Error::InvalidSpec(format!(
                                "component {i}: circle axes are not orthonormal"
                            )));
                        }
                        (u.clone(), v.clone())
                    }
                    None => {
                        let mut u = vec![0.0; d];
                        let mut v = vec![0.0; d];
                        u[0] = 1.0;
                        v[1] = 1.0;
                        (u, v)
                    }
                };
                Ok(PreparedComponent::Circle {
                    frame: CircleFrame {
                        center: center.clone(),
                        u,
                        v,
                        radius: *radius,
                    },
                    mean_angle: *mean_angle,
                    concentration: *concentration,
                })
            }
        }
    }

    pub(crate) fn prepare(&self) -> Result<Vec<PreparedComponent>> {
        self.validate()?;
        (0..self.components.len()).map(|i| self.prepare_component(i)).collect()
    }

    /// Distance from `x` to the support of each component, in component order.
    pub fn support_distances(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ambient_dim {
            return Err(Error::DimensionMismatch {
                expected: self.ambient_dim,
                got: x.len(),
            });
        }
        Ok(self.prepare()?.iter().map(|p| p.support_distance(x)).collect())
    }

    /// The mixture restricted to one class, weights renormalized and labels dropped.
    pub fn restrict_to_class(&self, class: usize) -> Result<ManifoldSpec> {
        let members: Vec<&Component> = self
            .components
            .iter()
            .filter(|c| c.class_label == Some(class))
            .collect();
        if members.is_empty() {
            return Err(Error::InvalidSpec(format!("no component with class {class}")));
        }
        let total: f64 = members.iter().map(|c| c.weight).sum();
        let components = members
            .into_iter()
            .map(|c| Component {
                weight: c.weight / total,
                class_label: None,
                kind: c.kind.clone(),
            })
            .collect();
        ManifoldSpec::new(self.ambient_dim, components)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ManifoldSpec = serde_json::from_str(s)?;
        if spec.schema != SPEC_SCHEMA_VERSION {
            return Err(Error::InvalidSpec(format!("unsupported spec schema {}", spec.schema)));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Exact local intrinsic dimension at `x`: the declared dimension of the
/// nearest component. Every component within `tol` counts as nearest, and
/// ties resolve to the smallest dimension.
pub fn true_lid(spec: &ManifoldSpec, x: &[f64], tol: f64) -> Result<usize> {
    if x.len() != spec.ambient_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.ambient_dim,
            got: x.len(),
        });
    }
    let prepared = spec.prepare()?;
    true_lid_prepared(spec, &prepared, x, tol)
}

pub(crate) fn true_lid_prepared(
    spec: &ManifoldSpec,
    prepared: &[PreparedComponent],
    x: &[f64],
    tol: f64,
) -> Result<usize> {
    let mut best: Option<usize> = None;
    let mut nearest = f64::INFINITY;
    for (c, p) in spec.components.iter().zip(prepared) {
        let dist = p.support_distance(x);
        nearest = nearest.min(dist);
        if dist <= tol {
            let d0 = c.kind.intrinsic_dim();
            best = Some(best.map_or(d0, |b| b.min(d0)));
        }
    }
    best.ok_or(Error::OffSupport { distance: nearest, tol })
}

/// `r` orthonormal vectors in `R^d` from Gram–Schmidt on seeded Gaussian draws.
pub fn random_orthonormal(d: usize, r: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut g = rng::rng(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(r);
    while out.len() < r {
        let mut v = rng::normal_vec(&mut g, d);
        for u in &out {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let n = norm_sq(&v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out
}
