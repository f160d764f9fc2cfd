//! Fully connected ε-prediction network with Fourier time features.

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::rng::{self, LabRng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub ambient_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub time_features: usize,
}

impl Architecture {
    pub fn new(ambient_dim: usize, cond_dim: usize, hidden: Vec<usize>, time_features: usize) -> Self {
        Self {
            ambient_dim,
            cond_dim,
            hidden,
            time_features,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.ambient_dim + 2 * self.time_features + self.cond_dim
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim());
        w.extend(&self.hidden);
        w.push(self.ambient_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[1] * p[0] + p[1]).sum()
    }

    /// `(weight offset, bias offset, out, in)` per layer; weights are column-major.
    pub(crate) fn layout(&self) -> Vec<LayerLayout> {
        let mut off = 0;
        self.widths()
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let l = LayerLayout {
                    w: off,
                    b: off + fan_in * fan_out,
                    rows: fan_out,
                    cols: fan_in,
                };
                off += fan_in * fan_out + fan_out;
                l
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerLayout {
    pub w: usize,
    pub b: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerLayout {
    pub fn weight<'a>(&self, params: &'a [f64]) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(&params[self.w..self.w + self.rows * self.cols], self.rows, self.cols)
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.b..self.b + self.rows]
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn silu_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[sin(ω_j t), cos(ω_j t)]` with `ω_j = 2^j`.
pub(crate) fn time_features(t: f64, count: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 * count);
    for j in 0..count {
        let w = (1u64 << j) as f64;
        f.push((w * t).sin());
    }
    for j in 0..count {
        let w = (1u64 << j) as f64;
        f.push((w * t).cos());
    }
    f
}

/// LeCun-normal weights, zero biases.
pub(crate) fn init_params(arch: &Architecture, r: &mut LabRng) -> Vec<f64> {
    let mut p = vec![0.0; arch.param_count()];
    for l in arch.layout() {
        let std = (1.0 / l.cols as f64).sqrt();
        for v in &mut p[l.w..l.w + l.rows * l.cols] {
            *v = std * rng::standard_normal(r);
        }
    }
    p
}

/// Activations kept for the backward and tangent passes.
pub(crate) struct ForwardCache {
    /// Pre-activations per layer (`out × batch`).
    pub pre: Vec<DMatrix<f64>>,
    /// Inputs to each layer (`in × batch`); `inputs[0]` is the network input.
    pub inputs: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.pre.last().expect("network has at least one layer")
    }
}

/// Runs the network on the columns of `input`.
pub(crate) fn forward(arch: &Architecture, params: &[f64], input: DMatrix<f64>) -> ForwardCache {
    let layout = arch.layout();
    let n_layers = layout.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut inputs = Vec::with_capacity(n_layers);
    let mut a = input;
    for (i, l) in layout.iter().enumerate() {
        let mut z = l.weight(params) * &a;
        let b = l.bias(params);
        for mut col in z.column_iter_mut() {
            for (v, bi) in col.iter_mut().zip(b) {
                *v += bi;
            }
        }
        inputs.push(a);
        if i + 1 < n_layers {
            a = z.map(silu);
        } else {
            a = DMatrix::zeros(0, 0);
        }
        pre.push(z);
    }
    ForwardCache { pre, inputs }
}

/// Parameter gradient of `Σ ⟨grad_out, output⟩`.
pub(crate) fn backward(arch: &Architecture, params: &[f64], cache: &ForwardCache, grad_out: DMatrix<f64>) -> Vec<f64> {
    let layout = arch.layout();
    let mut grad = vec![0.0; params.len()];
    let mut g = grad_out;
    for (i, l) in layout.iter().enumerate().rev() {
        let dw = &g * cache.inputs[i].transpose();
        grad[l.w..l.w + l.rows * l.cols].copy_from_slice(dw.as_slice());
        for (k, row) in g.row_iter().enumerate() {
            grad[l.b + k] = row.sum();
        }
        if i > 0 {
            let mut prev = l.weight(params).transpose() * &g;
            let z = &cache.pre[i - 1];
            prev.zip_apply(z, |gv, zv| *gv *= silu_prime(zv));
            g = prev;
        }
    }
    grad
}

/// Forward-mode tangents of the output for a single input column.
///
/// `tangents` is `in × p` (one tangent per column); returns `out × p`.
pub(crate) fn tangent_forward(
    arch: &Architecture,
    params: &[f64],
    cache: &ForwardCache,
    tangents: DMatrix<f64>,
) -> DMatrix<f64> {
    let layout = arch.layout();
    let mut t = tangents;
    for (i, l) in layout.iter().enumerate() {
        let mut z = l.weight(params) * &t;
        if i + 1 < layout.len() {
            let pre = &cache.pre[i];
            for mut col in z.column_iter_mut() {
                for (v, zv) in col.iter_mut().zip(pre.column(0).iter()) {
                    *v *= silu_prime(*zv);
                }
            }
        }
        t = z;
    }
    t
}
