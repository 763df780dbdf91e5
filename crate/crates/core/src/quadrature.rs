//! Gauss-Legendre quadrature on `[-1, 1]^d` and linear cuboid elements.
//!
//! A rule with `n` points per axis integrates polynomials of degree
//! `2n - 1` in each coordinate exactly. Elements are axis-aligned cubes of
//! side `sigma`; each carries `2^d` multilinear basis functions, one per
//! vertex, and maps to the reference cube by a scale and a translation.

use crate::error::{Error, Result};

/// Largest supported number of points per axis.
pub const MAX_ORDER: usize = 16;

/// Largest tensor rule (total node count) we are willing to build.
pub const MAX_TENSOR_NODES: usize = 1_000_000;

const NEWTON_MAX_ITER: usize = 100;

/// A one-dimensional Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes in ascending order.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrates `h` over `[-1, 1]`.
    pub fn integrate(&self, h: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * h(x))
            .sum()
    }
}

/// Evaluates `(P_n(x), P_n'(x))` by the three-term recurrence.
pub fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = next;
    }
    // Derivative from the standard identity; only used away from |x| = 1.
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// Builds the `n`-point rule: roots of `P_n` by Newton iteration from
/// Chebyshev-like initial guesses, weights `2 / ((1 - x^2) P_n'(x)^2)`.
pub fn legendre_rule(n: usize) -> Result<QuadratureRule> {
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(Error::Config(format!(
            "Gauss-Legendre order must lie in 1..={MAX_ORDER}, got {n}"
        )));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    // Solve for the non-negative roots and mirror them so the rule is exactly
    // symmetric.
    for i in 0..n / 2 {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let (p, dp) = legendre(n, x);
            let step = p / dp;
            x -= step;
            if step.abs() <= 1e-15 * x.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "Newton iteration for root {i} of P_{n} did not converge"
            )));
        }
        let (_, dp) = legendre(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    if n % 2 == 1 {
        let (_, dp) = legendre(n, 0.0);
        nodes[n / 2] = 0.0;
        weights[n / 2] = 2.0 / (dp * dp);
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Tensor-product rule on `[-1, 1]^d`, flattened in row-major order (the
/// last coordinate varies fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRule {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl TensorRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.nodes
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    pub fn integrate(&self, h: impl Fn(&[f64]) -> f64) -> f64 {
        self.iter().map(|(x, w)| w * h(x)).sum()
    }
}

pub fn tensor_quadrature(rule: &QuadratureRule, d: usize) -> Result<TensorRule> {
    if d == 0 {
        return Err(Error::Config(
            "tensor rule dimension must be positive".into(),
        ));
    }
    let n = rule.order();
    let total = (0..d).try_fold(1usize, |acc, _| acc.checked_mul(n));
    let total = match total {
        Some(t) if t <= MAX_TENSOR_NODES => t,
        _ => {
            return Err(Error::Config(format!(
                "tensor rule with {n}^{d} nodes exceeds the limit of {MAX_TENSOR_NODES}"
            )))
        }
    };
    let mut nodes = Vec::with_capacity(total * d);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let mut w = 1.0;
        for &i in &idx {
            nodes.push(rule.nodes[i]);
            w *= rule.weights[i];
        }
        weights.push(w);
        for j in (0..d).rev() {
            idx[j] += 1;
            if idx[j] < n {
                break;
            }
            idx[j] = 0;
        }
    }
    Ok(TensorRule {
        dim: d,
        nodes,
        weights,
    })
}

/// Which end of the reference interval a 1D basis function is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Vertex {
    /// `xi = -1`, basis `0.5 (1 - xi)`.
    Lower,
    /// `xi = +1`, basis `0.5 (1 + xi)`.
    Upper,
}

impl Vertex {
    pub fn coordinate(self) -> f64 {
        match self {
            Vertex::Lower => -1.0,
            Vertex::Upper => 1.0,
        }
    }
}

pub fn basis_1d(vertex: Vertex, xi: f64) -> f64 {
    match vertex {
        Vertex::Lower => 0.5 * (1.0 - xi),
        Vertex::Upper => 0.5 * (1.0 + xi),
    }
}

pub fn basis_nd(vertex: &[Vertex], xi: &[f64]) -> f64 {
    debug_assert_eq!(vertex.len(), xi.len());
    vertex
        .iter()
        .zip(xi)
        .map(|(&v, &x)| basis_1d(v, x))
        .product()
}

/// All `2^d` vertex multi-indices of a `d`-cube, lower-first in each axis.
pub fn element_vertices(d: usize) -> Vec<Vec<Vertex>> {
    (0..1usize << d)
        .map(|bits| {
            (0..d)
                .map(|j| {
                    if bits >> (d - 1 - j) & 1 == 0 {
                        Vertex::Lower
                    } else {
                        Vertex::Upper
                    }
                })
                .collect()
        })
        .collect()
}

/// Maps the reference cube onto an axis-aligned element: `s = center + (sigma/2) xi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementTransform {
    pub center: Vec<f64>,
    pub sigma: f64,
}

impl ElementTransform {
    pub fn new(center: Vec<f64>, sigma: f64) -> Self {
        Self { center, sigma }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Determinant of `(sigma/2) I_d`.
    pub fn jacobian_det(&self) -> f64 {
        (0.5 * self.sigma).powi(self.dim() as i32)
    }

    pub fn to_physical(&self, xi: &[f64]) -> Vec<f64> {
        let h = 0.5 * self.sigma;
        self.center.iter().zip(xi).map(|(c, x)| c + h * x).collect()
    }

    pub fn to_reference(&self, s: &[f64]) -> Vec<f64> {
        let h = 0.5 * self.sigma;
        self.center
            .iter()
            .zip(s)
            .map(|(c, x)| (x - c) / h)
            .collect()
    }
}
