//! Grid solver for the level-set equation: WENO5 one-sided derivatives,
//! per-axis upwinding, and the three-stage TVD Runge-Kutta integrator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicalSystem;
use crate::error::{check_dim, Error, Result};
use crate::losses::BcMode;
use crate::pde::SigmoidIc;

/// WENO5 needs a seven-point stencil.
pub const MIN_NODES: usize = 7;
const GHOSTS: usize = 3;

/// Node values on a regular lattice, row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub bounds: Vec<[f64; 2]>,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(bounds: Vec<[f64; 2]>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_dim(bounds.len(), shape.len())?;
        if let Some(k) = shape.iter().position(|&n| n < MIN_NODES) {
            return Err(Error::Config(format!(
                "grid axis {k} has {} nodes; WENO5 needs at least {MIN_NODES}",
                shape[k]
            )));
        }
        if bounds.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(Error::Config("grid bounds must be increasing".into()));
        }
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::Shape(format!(
                "{} values for {n} nodes",
                values.len()
            )));
        }
        Ok(Self {
            bounds,
            shape,
            values,
        })
    }

    /// Samples `f` at every node.
    pub fn from_fn(
        bounds: Vec<[f64; 2]>,
        shape: Vec<usize>,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        let mut field = Self::new(bounds, shape, vec![0.0; n])?;
        let mut x = vec![0.0; field.dim()];
        for idx in 0..n {
            field.node(idx, &mut x);
            field.values[idx] = f(&x);
        }
        Ok(field)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self, k: usize) -> f64 {
        (self.bounds[k][1] - self.bounds[k][0]) / (self.shape[k] - 1) as f64
    }

    pub fn stride(&self, k: usize) -> usize {
        self.shape[k + 1..].iter().product()
    }

    pub fn coord(&self, k: usize, i: usize) -> f64 {
        if i + 1 == self.shape[k] {
            self.bounds[k][1]
        } else {
            self.bounds[k][0] + i as f64 * self.spacing(k)
        }
    }

    /// Coordinates of flat node `idx`.
    pub fn node(&self, mut idx: usize, out: &mut [f64]) {
        for k in (0..self.dim()).rev() {
            let n = self.shape[k];
            out[k] = self.coord(k, idx % n);
            idx /= n;
        }
    }

    pub fn is_boundary(&self, mut idx: usize) -> bool {
        for k in (0..self.dim()).rev() {
            let n = self.shape[k];
            let i = idx % n;
            if i == 0 || i + 1 == n {
                return true;
            }
            idx /= n;
        }
        false
    }
}

/// The smoothness-weighted correction `Phi(a, b, c, d)`.
#[inline]
fn weno_correction(a: f64, b: f64, c: f64, d: f64, eps: f64) -> f64 {
    let s0 = 13.0 * (a - b).powi(2) + 3.0 * (a - 3.0 * b).powi(2);
    let s1 = 13.0 * (b - c).powi(2) + 3.0 * (b + c).powi(2);
    let s2 = 13.0 * (c - d).powi(2) + 3.0 * (3.0 * c - d).powi(2);
    let a0 = 1.0 / (eps + s0).powi(2);
    let a1 = 6.0 / (eps + s1).powi(2);
    let a2 = 3.0 / (eps + s2).powi(2);
    let sum = a0 + a1 + a2;
    let w0 = a0 / sum;
    let w2 = a2 / sum;
    w0 * (a - 2.0 * b + c) / 3.0 + (w2 - 0.5) * (b - 2.0 * c + d) / 6.0
}

/// Copies `line` into `pad` with three ghost nodes per side, linearly
/// extrapolated from the two outermost nodes.
fn pad_line(line: &[f64], pad: &mut [f64]) {
    let n = line.len();
    pad[GHOSTS..GHOSTS + n].copy_from_slice(line);
    let (lo, lo_slope) = (line[0], line[1] - line[0]);
    let (hi, hi_slope) = (line[n - 1], line[n - 1] - line[n - 2]);
    for j in 1..=GHOSTS {
        pad[GHOSTS - j] = lo - j as f64 * lo_slope;
        pad[GHOSTS + n - 1 + j] = hi + j as f64 * hi_slope;
    }
}

#[inline]
fn forward_diff(p: &[f64], j: usize, dx: f64) -> f64 {
    (p[j + 1] - p[j]) / dx
}

#[inline]
fn second_diff(p: &[f64], j: usize, dx: f64) -> f64 {
    (p[j + 1] - 2.0 * p[j] + p[j - 1]) / dx
}

#[inline]
fn central(p: &[f64], c: usize, dx: f64) -> f64 {
    (-forward_diff(p, c - 2, dx) + 7.0 * forward_diff(p, c - 1, dx) + 7.0 * forward_diff(p, c, dx)
        - forward_diff(p, c + 1, dx))
        / 12.0
}

/// Left-biased derivative at padded index `c`.
#[inline]
fn weno_minus(p: &[f64], c: usize, dx: f64, eps: f64) -> f64 {
    let s = |j| second_diff(p, j, dx);
    central(p, c, dx) - weno_correction(s(c - 2), s(c - 1), s(c), s(c + 1), eps)
}

/// Right-biased derivative at padded index `c`.
#[inline]
fn weno_plus(p: &[f64], c: usize, dx: f64, eps: f64) -> f64 {
    let s = |j| second_diff(p, j, dx);
    central(p, c, dx) + weno_correction(s(c + 2), s(c + 1), s(c), s(c - 1), eps)
}

/// One-sided WENO5 derivatives along one line of nodes, with linearly
/// extrapolated ghost nodes.
pub fn weno5_line(line: &[f64], dx: f64, eps: f64, minus: &mut [f64], plus: &mut [f64]) {
    let n = line.len();
    assert!(n >= 2 && minus.len() == n && plus.len() == n);
    let mut p = vec![0.0; n + 2 * GHOSTS];
    pad_line(line, &mut p);
    for i in 0..n {
        minus[i] = weno_minus(&p, i + GHOSTS, dx, eps);
        plus[i] = weno_plus(&p, i + GHOSTS, dx, eps);
    }
}

/// `(phi^-, phi^+)` along axis `k` at every node.
pub fn weno5_derivatives(field: &GridField, k: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = field.shape[k];
    let stride = field.stride(k);
    let lines = field.len() / n;
    let dx = field.spacing(k);
    let base = |l: usize| (l / stride) * n * stride + l % stride;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..lines)
        .into_par_iter()
        .map(|l| {
            let b = base(l);
            let line: Vec<f64> = (0..n).map(|i| field.values[b + i * stride]).collect();
            let mut m = vec![0.0; n];
            let mut p = vec![0.0; n];
            weno5_line(&line, dx, eps, &mut m, &mut p);
            (m, p)
        })
        .collect();
    let mut minus = vec![0.0; field.len()];
    let mut plus = vec![0.0; field.len()];
    for (l, (m, p)) in parts.into_iter().enumerate() {
        let b = base(l);
        for i in 0..n {
            minus[b + i * stride] = m[i];
            plus[b + i * stride] = p[i];
        }
    }
    (minus, plus)
}

/// Flow evaluated once per node, reused by every stage.
#[derive(Debug, Clone)]
pub struct NodeFlow {
    dim: usize,
    values: Vec<f64>,
}

impl NodeFlow {
    pub fn new(field: &GridField, sys: &DynamicalSystem) -> Result<Self> {
        check_dim(sys.dim(), field.dim())?;
        let d = field.dim();
        let values = (0..field.len())
            .into_par_iter()
            .flat_map_iter(|idx| {
                let mut x = vec![0.0; d];
                let mut f = vec![0.0; d];
                field.node(idx, &mut x);
                sys.eval_into(&x, &mut f);
                f
            })
            .collect();
        Ok(Self { dim: d, values })
    }

    /// Largest `|f_k|` over nodes and axes.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `phi_t = min(0, sum_k f_k phi_k)` with `phi_k = phi^+` where `f_k > 0`,
/// `phi^-` where `f_k < 0` and their average where `f_k = 0`. In fixed
/// boundary mode boundary nodes are held still.
pub fn level_set_rhs(field: &GridField, flow: &NodeFlow, bc: BcMode, eps: f64) -> Vec<f64> {
    let d = flow.dim;
    let mut dot = vec![0.0; field.len()];
    for k in 0..d {
        let n = field.shape[k];
        let stride = field.stride(k);
        let dx = field.spacing(k);
        let base = |l: usize| (l / stride) * n * stride + l % stride;
        let parts: Vec<Vec<f64>> = (0..field.len() / n)
            .into_par_iter()
            .map_init(
                || (vec![0.0; n], vec![0.0; n + 2 * GHOSTS]),
                |(line, pad), l| {
                    let b = base(l);
                    for i in 0..n {
                        line[i] = field.values[b + i * stride];
                    }
                    pad_line(line, pad);
                    (0..n)
                        .map(|i| {
                            let f = flow.values[(b + i * stride) * d + k];
                            let g = if f > 0.0 {
                                weno_plus(pad, i + GHOSTS, dx, eps)
                            } else if f < 0.0 {
                                weno_minus(pad, i + GHOSTS, dx, eps)
                            } else {
                                0.0
                            };
                            f * g
                        })
                        .collect()
                },
            )
            .collect();
        for (l, part) in parts.into_iter().enumerate() {
            let b = base(l);
            for (i, v) in part.into_iter().enumerate() {
                dot[b + i * stride] += v;
            }
        }
    }
    for (idx, v) in dot.iter_mut().enumerate() {
        *v = if bc == BcMode::Fixed && field.is_boundary(idx) {
            0.0
        } else {
            v.min(0.0)
        };
    }
    dot
}

/// One step of the three-stage scheme
///
/// ```text
/// u1 = u0 + dt h(u0)
/// u2 = u1 + dt/4  (-3 h(u0) + h(u1))
/// u3 = u2 + dt/12 (-h(u0) - h(u1) + 8 h(u2))
/// ```
pub fn tvdrk3_step(u0: &[f64], dt: f64, mut h: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Vec<f64>> {
    let h0 = h(u0);
    let u1: Vec<f64> = u0.iter().zip(&h0).map(|(u, a)| u + dt * a).collect();
    let h1 = h(&u1);
    let u2: Vec<f64> = u1
        .iter()
        .zip(h0.iter().zip(&h1))
        .map(|(u, (a, b))| u + dt / 4.0 * (-3.0 * a + b))
        .collect();
    let h2 = h(&u2);
    let u3: Vec<f64> = (0..u0.len())
        .map(|i| u2[i] + dt / 12.0 * (-h0[i] - h1[i] + 8.0 * h2[i]))
        .collect();
    if u3.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value after time step".into()));
    }
    Ok(u3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NumericConfig {
    /// Nodes per spatial axis.
    pub nodes: Vec<usize>,
    /// Fraction of the CFL bound `min dx / max |f|` used as the time step.
    pub cfl: f64,
    pub epsilon: f64,
    /// Allowed excursion outside the initial value range, as a fraction of
    /// that range, before a step counts as unstable.
    pub overshoot_tol: f64,
    /// Snapshot times; sorted and deduplicated before use.
    pub snapshots: Vec<f64>,
}

impl Default for NumericConfig {
    fn default() -> Self {
        Self {
            nodes: vec![101, 101],
            cfl: 0.5,
            epsilon: 1e-6,
            overshoot_tol: 0.01,
            snapshots: Vec::new(),
        }
    }
}

/// A solution snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub field: GridField,
}

/// Statistics gathered while integrating.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub steps: usize,
    pub dt: f64,
    /// Largest per-node increase seen in any step (should be <= 0).
    pub max_increase: f64,
}

pub fn normalized_snapshots(times: &[f64], t_max: f64) -> Vec<f64> {
    let mut t: Vec<f64> = times
        .iter()
        .copied()
        .filter(|t| *t >= 0.0 && *t <= t_max)
        .collect();
    t.push(t_max);
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Integrates from the sampled initial condition to `t_max`.
pub fn solve_numeric(
    sys: &DynamicalSystem,
    bounds: &[[f64; 2]],
    ic: &SigmoidIc,
    bc: BcMode,
    t_max: f64,
    cfg: &NumericConfig,
) -> Result<(Vec<Snapshot>, SolveStats)> {
    if sys.dim() > 3 {
        return Err(Error::Config(format!(
            "dense grids are limited to 3 spatial dimensions (system has {}); use the \
             trajectory oracle instead",
            sys.dim()
        )));
    }
    check_dim(sys.dim(), bounds.len())?;
    check_dim(sys.dim(), cfg.nodes.len())?;
    check_dim(sys.dim(), ic.dim())?;
    if !(t_max > 0.0 && cfg.cfl > 0.0 && cfg.epsilon > 0.0 && cfg.overshoot_tol >= 0.0) {
        return Err(Error::Config(
            "t_max, cfl and epsilon must be positive".into(),
        ));
    }
    let mut field = GridField::from_fn(bounds.to_vec(), cfg.nodes.clone(), |x| ic.eval(x))?;
    let lo = field.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    // A steep initial profile makes WENO ring slightly, and since updates are
    // clipped at zero that noise only ever pushes values down. Unstable steps
    // grow far past this.
    let tol = cfg.overshoot_tol * (hi - lo);

    let flow = NodeFlow::new(&field, sys)?;
    let min_dx = (0..field.dim())
        .map(|k| field.spacing(k))
        .fold(f64::INFINITY, f64::min);
    let fmax = flow.max_abs();
    let dt = if fmax > 0.0 {
        cfg.cfl * min_dx / fmax
    } else {
        t_max
    };

    let times = normalized_snapshots(&cfg.snapshots, t_max);
    let mut snapshots = Vec::with_capacity(times.len());
    let mut stats = SolveStats {
        dt,
        ..Default::default()
    };
    let mut t = 0.0;
    for &target in &times {
        while target - t > 1e-12 * t_max {
            let h = dt.min(target - t);
            let shape = field.shape.clone();
            let bounds = field.bounds.clone();
            let next = tvdrk3_step(&field.values, h, |u| {
                let f = GridField {
                    bounds: bounds.clone(),
                    shape: shape.clone(),
                    values: u.to_vec(),
                };
                level_set_rhs(&f, &flow, bc, cfg.epsilon)
            })?;
            for (a, b) in next.iter().zip(&field.values) {
                stats.max_increase = stats.max_increase.max(a - b);
            }
            if let Some(&v) = next.iter().find(|&&v| v < lo - tol || v > hi + tol) {
                return Err(Error::Cfl {
                    time: t + h,
                    value: v,
                    lo,
                    hi,
                });
            }
            field.values = next;
            t += h;
            stats.steps += 1;
        }
        t = target;
        snapshots.push(Snapshot {
            time: target,
            field: field.clone(),
        });
    }
    Ok((snapshots, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn line_field(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> GridField {
        let dx = (hi - lo) / (n - 1) as f64;
        let values = (0..n).map(|i| f(lo + i as f64 * dx)).collect();
        GridField::new(vec![[lo, hi]], vec![n], values).unwrap()
    }

    #[test]
    fn linear_and_constant_fields() {
        let f = line_field(|x| 2.0 * x, -1.0, 1.0, 21);
        let (m, p) = weno5_derivatives(&f, 0, 1e-6);
        for i in 0..21 {
            assert!((m[i] - 2.0).abs() < 1e-10 && (p[i] - 2.0).abs() < 1e-10);
        }
        let c = line_field(|_| 3.5, 0.0, 1.0, 9);
        let (m, p) = weno5_derivatives(&c, 0, 1e-6);
        assert!(m.iter().chain(&p).all(|&v| v == 0.0));
    }

    #[test]
    fn derivatives_along_each_axis() {
        // phi = x + 3 y on a 2D grid.
        let shape = vec![9, 11];
        let bounds = vec![[0.0, 1.0], [-1.0, 1.0]];
        let mut values = Vec::new();
        for i in 0..9 {
            for j in 0..11 {
                values.push(i as f64 / 8.0 + 3.0 * (-1.0 + 2.0 * j as f64 / 10.0));
            }
        }
        let f = GridField::new(bounds, shape, values).unwrap();
        let (m0, p0) = weno5_derivatives(&f, 0, 1e-6);
        let (m1, p1) = weno5_derivatives(&f, 1, 1e-6);
        for i in 0..f.len() {
            assert!((m0[i] - 1.0).abs() < 1e-10 && (p0[i] - 1.0).abs() < 1e-10);
            assert!((m1[i] - 3.0).abs() < 1e-10 && (p1[i] - 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn too_few_nodes() {
        assert!(GridField::new(vec![[0.0, 1.0]], vec![6], vec![0.0; 6]).is_err());
    }

    #[test]
    fn rhs_hand_values_1d() {
        // f = -x, phi = x: upwinded grad.f = -x, so phi_t = -x for x > 0.
        let sys = DynamicalSystem::preset("linear_1d", &BTreeMap::new()).unwrap();
        let field = line_field(|x| x, -1.0, 1.0, 21);
        let flow = NodeFlow::new(&field, &sys).unwrap();
        let rhs = level_set_rhs(&field, &flow, BcMode::Free, 1e-6);
        for i in 0..21 {
            let x = field.coord(0, i);
            let expect = if x > 0.0 { -x } else { 0.0 };
            assert!((rhs[i] - expect).abs() < 1e-12, "x = {x}: {}", rhs[i]);
        }
    }

    #[test]
    fn rhs_matches_two_sided_selection() {
        let sys = DynamicalSystem::preset("closed_roa", &BTreeMap::new()).unwrap();
        let f = GridField::from_fn(vec![[-1.0, 4.0], [-1.0, 4.0]], vec![23, 17], |x| {
            (1.3 * x[0]).sin() * x[1] + 0.2 * x[0] * x[0]
        })
        .unwrap();
        let flow = NodeFlow::new(&f, &sys).unwrap();
        let rhs = level_set_rhs(&f, &flow, BcMode::Free, 1e-6);
        let d0 = weno5_derivatives(&f, 0, 1e-6);
        let d1 = weno5_derivatives(&f, 1, 1e-6);
        let mut x = [0.0; 2];
        for idx in 0..f.len() {
            f.node(idx, &mut x);
            let v = sys.eval_flow(&x).unwrap();
            let pick = |fk: f64, (m, p): &(Vec<f64>, Vec<f64>)| {
                if fk > 0.0 {
                    p[idx]
                } else if fk < 0.0 {
                    m[idx]
                } else {
                    0.5 * (m[idx] + p[idx])
                }
            };
            let expect = (v[0] * pick(v[0], &d0) + v[1] * pick(v[1], &d1)).min(0.0);
            assert!((rhs[idx] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_flow_freezes_the_field() {
        let sys = DynamicalSystem::preset("zero_2d", &BTreeMap::new()).unwrap();
        let ic = SigmoidIc::standard(vec![0.0, 0.0], 1.0);
        let cfg = NumericConfig {
            nodes: vec![15, 15],
            snapshots: vec![0.5],
            ..Default::default()
        };
        let (snaps, _) = solve_numeric(
            &sys,
            &[[-2.0, 2.0], [-2.0, 2.0]],
            &ic,
            BcMode::Free,
            1.0,
            &cfg,
        )
        .unwrap();
        assert_eq!(snaps.len(), 2);
        let mut x = [0.0; 2];
        for (idx, v) in snaps[1].field.values.iter().enumerate() {
            snaps[1].field.node(idx, &mut x);
            assert_eq!(*v, ic.eval(&x));
        }
    }

    #[test]
    fn constant_rhs_advances_by_dt() {
        let u = tvdrk3_step(&[1.0, -2.0], 0.25, |u| vec![1.0; u.len()]).unwrap();
        assert_eq!(u, vec![1.25, -1.75]);
        let same = tvdrk3_step(&[4.0], 0.1, |_| vec![0.0]).unwrap();
        assert_eq!(same, vec![4.0]);
    }

    #[test]
    fn tvdrk3_is_third_order() {
        let run = |steps: usize| {
            let dt = 1.0 / steps as f64;
            let mut u = vec![1.0];
            for _ in 0..steps {
                u = tvdrk3_step(&u, dt, |v| vec![-v[0]]).unwrap();
            }
            (u[0] - (-1.0f64).exp()).abs()
        };
        let (e1, e2, e3) = (run(10), run(20), run(40));
        let order = ((e1 / e2).log2() + (e2 / e3).log2()) / 2.0;
        assert!((order - 3.0).abs() < 0.2, "order {order}");
    }

    #[test]
    fn weno_converges_on_sine() {
        let err = |n: usize| {
            let f = line_field(f64::sin, 0.0, 2.0 * PI, n);
            let (m, p) = weno5_derivatives(&f, 0, 1e-6);
            (3..n - 3)
                .map(|i| {
                    let c = f.coord(0, i).cos();
                    (m[i] - c).abs().max((p[i] - c).abs())
                })
                .fold(0.0, f64::max)
        };
        let e: Vec<f64> = [40, 80, 160].iter().map(|&n| err(n)).collect();
        assert!(e[0] / e[1] >= 16.0 && e[1] / e[2] >= 16.0, "{e:?}");
    }

    #[test]
    fn snapshot_times_normalised() {
        assert_eq!(
            normalized_snapshots(&[3.0, 1.0, 3.0, 12.0, -1.0], 10.0),
            vec![1.0, 3.0, 10.0]
        );
    }
}
