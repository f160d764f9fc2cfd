use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::spec::{ManifoldSpec, PreparedComponent};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::rng::{self, LabRng};

/// Samples together with the component and class that produced each row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub points: Batch,
    pub component_ids: Vec<usize>,
    pub class_labels: Option<Vec<usize>>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Draws `n` i.i.d. points from the mixture.
pub fn sample_manifold(spec: &ManifoldSpec, n: usize, seed: u64) -> Result<LabeledBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let prepared = spec.prepare()?;
    let mut r = rng::rng(seed);
    let cumulative: Vec<f64> = spec
        .components
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.weight;
            Some(*acc)
        })
        .collect();
    let d = spec.ambient_dim;
    let mut data = Vec::with_capacity(n * d);
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng::uniform(&mut r) * cumulative[cumulative.len() - 1];
        let k = cumulative.iter().position(|c| u < *c).unwrap_or(cumulative.len() - 1);
        data.extend(draw_component(&prepared[k], &mut r));
        ids.push(k);
    }
    let class_labels = spec.class_count().map(|_| {
        ids.iter()
            .map(|&k| spec.components[k].class_label.unwrap_or(0))
            .collect()
    });
    Ok(LabeledBatch {
        points: Batch::new(n, d, data)?,
        component_ids: ids,
        class_labels,
    })
}

fn draw_component(c: &PreparedComponent, r: &mut LabRng) -> Vec<f64> {
    match c {
        PreparedComponent::Gaussian(g) => {
            let mut x = g.mean.clone();
            for &k in &g.support {
                let z = rng::standard_normal(r) * g.eigvals[k].sqrt();
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi += z * g.eigvecs[(i, k)];
                }
            }
            x
        }
        PreparedComponent::Circle {
            frame,
            mean_angle,
            concentration,
        } => frame.point(von_mises(*mean_angle, *concentration, r)),
    }
}

/// Von Mises angle by the Best–Fisher rejection sampler.
pub(crate) fn von_mises(mu: f64, kappa: f64, r: &mut LabRng) -> f64 {
    if kappa < 1e-8 {
        return mu + PI * (2.0 * rng::uniform(r) - 1.0);
    }
    let a = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let b = (a - (2.0 * a).sqrt()) / (2.0 * kappa);
    let rr = (1.0 + b * b) / (2.0 * b);
    loop {
        let u1 = rng::uniform(r);
        let u2 = rng::uniform(r);
        let u3 = rng::uniform(r);
        let z = (PI * u1).cos();
        let f = (1.0 + rr * z) / (rr + z);
        let c = kappa * (rr - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = mu + (u3 - 0.5).signum() * f.clamp(-1.0, 1.0).acos();
            return (theta + PI).rem_euclid(2.0 * PI) - PI;
        }
    }
}
