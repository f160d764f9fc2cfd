//! Minimal reverse-mode differentiation over vector-valued nodes.
//!
//! Only the operations the score networks need are supported. Values are
//! computed eagerly when a node is pushed; `gradient` sweeps the tape once in
//! reverse.

use super::mlp::{silu, silu_prime, silu_second};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Column-major matrix, borrowed from model parameters or owned.
#[derive(Debug, Clone)]
pub(crate) enum Mat<'a> {
    Borrowed { data: &'a [f64], rows: usize, cols: usize },
    Owned { data: Vec<f64>, rows: usize, cols: usize },
}

impl Mat<'_> {
    fn parts(&self) -> (&[f64], usize, usize) {
        match self {
            Mat::Borrowed { data, rows, cols } => (data, *rows, *cols),
            Mat::Owned { data, rows, cols } => (data, *rows, *cols),
        }
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let (data, rows, cols) = self.parts();
        let mut y = vec![0.0; rows];
        for (j, xj) in x.iter().enumerate().take(cols) {
            if *xj == 0.0 {
                continue;
            }
            let col = &data[j * rows..(j + 1) * rows];
            for (yi, a) in y.iter_mut().zip(col) {
                *yi += a * xj;
            }
        }
        y
    }

    fn matvec_t_acc(&self, g: &[f64], out: &mut [f64]) {
        let (data, rows, _) = self.parts();
        for (j, o) in out.iter_mut().enumerate() {
            let col = &data[j * rows..(j + 1) * rows];
            *o += col.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone)]
enum Op<'a> {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, Vec<f64>),
    MatVec(Mat<'a>, Var),
    Silu(Var),
    SiluPrime(Var),
    Sum(Var),
    SumSq(Var),
    Dot(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<'a> {
    value: Vec<f64>,
    op: Op<'a>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(v, Op::Scale(a, k))
    }

    /// `a + c` for a constant vector `c`.
    pub fn offset(&mut self, a: Var, c: &[f64]) -> Var {
        let v = zip(self.value(a), c, |x, y| x + y);
        self.push(v, Op::Offset(a))
    }

    /// Elementwise `a ⊙ c` for a constant vector `c`.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let v = zip(self.value(a), &c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c))
    }

    pub(crate) fn matvec(&mut self, m: Mat<'a>, x: Var) -> Var {
        let v = m.matvec(self.value(x));
        self.push(v, Op::MatVec(m, x))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| silu(*x)).collect();
        self.push(v, Op::Silu(a))
    }

    pub fn silu_prime(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| silu_prime(*x)).collect();
        self.push(v, Op::SiluPrime(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = vec![self.value(a).iter().sum()];
        self.push(v, Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = vec![self.value(a).iter().map(|x| x * x).sum()];
        self.push(v, Op::SumSq(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = vec![self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum()];
        self.push(v, Op::Dot(a, b))
    }

    /// Gradient of the scalar `output` with respect to `wrt`.
    pub fn gradient(&self, output: Var, wrt: Var) -> Result<Vec<f64>> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::InvalidArgument("gradient requires a scalar objective".into()));
        }
        if wrt.0 > output.0 {
            return Ok(vec![0.0; self.nodes[wrt.0].value.len()]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (wrt.0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if i == wrt.0 {
                return Ok(g);
            }
            let node = &self.nodes[i];
            let mut acc = |v: Var, delta: Vec<f64>| {
                if v.0 < wrt.0 {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|x| -x).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, zip(&g, self.value(*b), |x, y| x * y));
                    acc(*b, zip(&g, self.value(*a), |x, y| x * y));
                }
                Op::Scale(a, k) => acc(*a, g.iter().map(|x| x * k).collect()),
                Op::Offset(a) => acc(*a, g),
                Op::MulConst(a, c) => acc(*a, zip(&g, c, |x, y| x * y)),
                Op::MatVec(m, x) => {
                    let mut out = vec![0.0; self.value(*x).len()];
                    m.matvec_t_acc(&g, &mut out);
                    acc(*x, out);
                }
                Op::Silu(a) => acc(*a, zip(&g, self.value(*a), |x, z| x * silu_prime(z))),
                Op::SiluPrime(a) => acc(*a, zip(&g, self.value(*a), |x, z| x * silu_second(z))),
                Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
                Op::SumSq(a) => acc(*a, self.value(*a).iter().map(|x| 2.0 * g[0] * x).collect()),
                Op::Dot(a, b) => {
                    acc(*a, self.value(*b).iter().map(|x| g[0] * x).collect());
                    acc(*b, self.value(*a).iter().map(|x| g[0] * x).collect());
                }
            }
        }
        Ok(vec![0.0; self.nodes[wrt.0].value.len()])
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_quadratic_form() {
        // f(c) = ‖W c + b‖² with W = [[1, 2], [3, 4]] (column-major [1, 3, 2, 4])
        let mut t = Tape::new();
        let c = t.leaf(vec![0.5, -1.0]);
        let w = Mat::Owned {
            data: vec![1.0, 3.0, 2.0, 4.0],
            rows: 2,
            cols: 2,
        };
        let y = t.matvec(w, c);
        let y = t.offset(y, &[1.0, 0.0]);
        let f = t.sum_sq(y);
        // y = [0.5 - 2 + 1, 1.5 - 4] = [-0.5, -2.5]; ∇ = 2 Wᵀ y
        let g = t.gradient(f, c).unwrap();
        assert_eq!(g, vec![2.0 * (-0.5 - 7.5), 2.0 * (-1.0 - 10.0)]);
    }

    #[test]
    fn gradient_through_nonlinearities() {
        let f = |c: &[f64]| -> f64 {
            let a = silu(c[0] * c[1]);
            let b = silu_prime(c[1] - 0.3);
            a * b + (c[0] - c[1]) * 2.0
        };
        let point = [0.7, -0.4];
        let mut t = Tape::new();
        let c = t.leaf(point.to_vec());
        let k0 = t.mul_const(c, vec![1.0, 0.0]);
        let k1 = t.mul_const(c, vec![0.0, 1.0]);
        let s0 = t.sum(k0);
        let s1 = t.sum(k1);
        let prod = t.mul(s0, s1);
        let a = t.silu(prod);
        let shifted = t.offset(s1, &[-0.3]);
        let b = t.silu_prime(shifted);
        let ab = t.dot(a, b);
        let diff = t.sub(s0, s1);
        let diff2 = t.scale(diff, 2.0);
        let out = t.add(ab, diff2);
        assert!((t.scalar(out) - f(&point)).abs() < 1e-15);
        let g = t.gradient(out, c).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut p = point;
            let mut m = point;
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let c = t.leaf(vec![1.0, 2.0]);
        let k = t.constant(vec![3.0]);
        let out = t.sum_sq(k);
        assert_eq!(t.gradient(out, c).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let mut t = Tape::new();
        let c = t.leaf(vec![1.0, 2.0]);
        assert!(t.gradient(c, c).is_err());
    }
}
