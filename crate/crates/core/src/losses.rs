//! The six training losses and their parameter gradients.
//!
//! Every data term is a root-sum-square `sqrt(sum e_i^2)` (not a mean), so
//! its gradient is `sum e_i de_i / L`; at `L = 0` the gradient is taken as 0.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Batch, Element, PointSet};
use crate::dynamics::DynamicalSystem;
use crate::error::{Error, Result};
use crate::network::{Mlp, Tape, CHUNK};
use crate::pde::SigmoidIc;
use crate::quadrature::{basis_nd, element_vertices, legendre_rule, tensor_quadrature, TensorRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub c_ic: f64,
    pub c_bc: f64,
    pub c_mon: f64,
    pub c_r: f64,
    pub c_v: f64,
    pub c_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            c_ic: 1.0,
            c_bc: 0.1,
            c_mon: 10.0,
            c_r: 1.0,
            c_v: 1.0,
            c_reg: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.c_ic, self.c_bc, self.c_mon, self.c_r, self.c_v, self.c_reg,
        ];
        if all.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        Self {
            c_ic: lambda * self.c_ic,
            c_bc: lambda * self.c_bc,
            c_mon: lambda * self.c_mon,
            c_r: lambda * self.c_r,
            c_v: lambda * self.c_v,
            c_reg: lambda * self.c_reg,
        }
    }
}

/// Whether the boundary slab is pinned to the initial condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcMode {
    /// `phi(x, t) = phi0(x)` on the spatial boundary for all `t`.
    Fixed,
    /// No boundary term; the level set may run into the box edge.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ic: f64,
    pub l_bc: f64,
    pub l_mon: f64,
    pub l_r: f64,
    pub l_v: f64,
    pub l_reg: f64,
    pub total: f64,
    pub n_ic: usize,
    pub n_bc: usize,
    pub n_collocation: usize,
    pub n_elements: usize,
}

impl LossReport {
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("ic", self.l_ic),
            ("bc", self.l_bc),
            ("mon", self.l_mon),
            ("r", self.l_r),
            ("v", self.l_v),
            ("reg", self.l_reg),
        ]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.c_ic * self.l_ic
            + w.c_bc * self.l_bc
            + w.c_mon * self.l_mon
            + w.c_r * self.l_r
            + w.c_v * self.l_v
            + w.c_reg * self.l_reg
    }

    pub const CSV_HEADER: &'static str = "epoch,l_ic,l_bc,l_mon,l_r,l_v,l_reg,total";

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.l_ic, self.l_bc, self.l_mon, self.l_r, self.l_v, self.l_reg, self.total
        )
    }
}

fn rss(v: impl Iterator<Item = f64>) -> f64 {
    // An empty f64 sum is -0.0.
    (v.map(|e| e * e).sum::<f64>() + 0.0).sqrt()
}

fn chunks(points: &PointSet) -> Vec<&[f64]> {
    points
        .as_flat()
        .chunks(CHUNK * points.dim().max(1))
        .collect()
}

fn forward(model: &Mlp, points: &PointSet, tangents: bool) -> Vec<Tape> {
    chunks(points)
        .into_par_iter()
        .map(|c| model.forward_tape(c, tangents))
        .collect()
}

/// Parameter gradient of `sum_r upstream[c][r] * out[c][r]` over chunks,
/// reduced in chunk order.
fn backward(model: &Mlp, tapes: &[Tape], upstream: &[Vec<f64>]) -> Vec<f64> {
    let parts: Vec<Vec<f64>> = tapes
        .par_iter()
        .zip(upstream.par_iter())
        .map(|(t, u)| {
            let mut g = vec![0.0; model.num_params()];
            model.backward(t, u, &mut g);
            g
        })
        .collect();
    let mut total = vec![0.0; model.num_params()];
    for g in parts {
        for (a, b) in total.iter_mut().zip(g) {
            *a += b;
        }
    }
    total
}

/// Residual data at collocation-like points, carried per chunk.
struct ResidualData {
    /// `r` per point.
    r: Vec<f64>,
    /// `f(x)` per point when the transport term is active, else empty row of zeros.
    active_flow: Vec<f64>,
}

fn residual_data(sys: &DynamicalSystem, tape: &Tape, points: &[f64]) -> ResidualData {
    let d = sys.dim() + 1;
    let ds = d - 1;
    let n = tape.len();
    let mut r = vec![0.0; n];
    let mut active_flow = vec![0.0; n * ds];
    let mut f = vec![0.0; ds];
    let phi_t = tape.derivative(ds);
    for i in 0..n {
        sys.eval_into(&points[i * d..i * d + ds], &mut f);
        let dot: f64 = (0..ds).map(|k| tape.derivative(k)[i] * f[k]).sum();
        if dot < 0.0 {
            active_flow[i * ds..(i + 1) * ds].copy_from_slice(&f);
            r[i] = phi_t[i] - dot;
        } else {
            r[i] = phi_t[i];
        }
    }
    ResidualData { r, active_flow }
}

/// Adds `alpha_i * dr_i/d(outputs)` into a chunk's upstream vector.
fn push_residual_upstream(up: &mut [f64], n: usize, ds: usize, data: &ResidualData, alpha: &[f64]) {
    for i in 0..n {
        let a = alpha[i];
        if a == 0.0 {
            continue;
        }
        up[n * (1 + ds) + i] += a;
        for k in 0..ds {
            up[n * (1 + k) + i] -= a * data.active_flow[i * ds + k];
        }
    }
}

/// Quadrature on the reference element, with basis values folded into the weights.
#[derive(Debug, Clone)]
pub struct ElementQuadrature {
    rule: TensorRule,
    /// `mass[k][q] = w_q * g_k(xi_q)`.
    mass: Vec<Vec<f64>>,
}

impl ElementQuadrature {
    pub fn new(order: usize, dim: usize) -> Result<Self> {
        let rule = tensor_quadrature(&legendre_rule(order)?, dim)?;
        let mass = element_vertices(dim)
            .iter()
            .map(|v| rule.iter().map(|(xi, w)| w * basis_nd(v, xi)).collect())
            .collect();
        Ok(Self { rule, mass })
    }

    pub fn order(&self) -> usize {
        (self.rule.len() as f64)
            .powf(1.0 / self.rule.dim() as f64)
            .round() as usize
    }

    /// Single node at the element centre, which is the collocation point.
    fn is_centre_rule(&self) -> bool {
        self.rule.len() == 1 && self.rule.node(0).iter().all(|&x| x == 0.0)
    }

    fn nodes_for(&self, elements: &[&Element]) -> PointSet {
        let d = self.rule.dim();
        let mut out = PointSet::new(d);
        let mut s = vec![0.0; d];
        for e in elements {
            let h = 0.5 * e.sigma;
            for (xi, _) in self.rule.iter() {
                for k in 0..d {
                    s[k] = e.center[k] + h * xi[k];
                }
                out.push(&s);
            }
        }
        out
    }

    /// `v_k = |J| sum_q mass[k][q] r_q` for one element.
    fn variations(&self, jac: f64, r: &[f64], out: &mut [f64]) {
        for (v, row) in out.iter_mut().zip(&self.mass) {
            *v = jac * row.iter().zip(r).map(|(m, x)| m * x).sum::<f64>();
        }
    }
}

/// The full training objective for one system and initial condition.
#[derive(Debug, Clone)]
pub struct Objective {
    pub system: DynamicalSystem,
    pub ic: SigmoidIc,
    pub bc_mode: BcMode,
    pub weights: LossWeights,
    pub quadrature: ElementQuadrature,
}

struct Collocated {
    tapes: Vec<Tape>,
    data: Vec<ResidualData>,
}

fn collocate(model: &Mlp, sys: &DynamicalSystem, points: &PointSet) -> Collocated {
    let pieces = chunks(points);
    let (tapes, data): (Vec<_>, Vec<_>) = pieces
        .into_par_iter()
        .map(|c| {
            let t = model.forward_tape(c, true);
            let d = residual_data(sys, &t, c);
            (t, d)
        })
        .unzip();
    Collocated { tapes, data }
}

/// Per-term errors and, for gradients, where they came from.
struct Terms {
    report: LossReport,
    ic_tapes: Vec<Tape>,
    ic_err: Vec<f64>,
    bc_tapes: Vec<Tape>,
    bc_err: Vec<f64>,
    col: Collocated,
    mon_err: Vec<f64>,
    nodes: Option<Collocated>,
    /// For each active element, index of its first quadrature node in the
    /// node set (or its collocation index for the centre rule).
    elem_first: Vec<usize>,
    elem_jac: Vec<f64>,
    variations: Vec<f64>,
}

impl Objective {
    pub fn new(
        system: DynamicalSystem,
        ic: SigmoidIc,
        bc_mode: BcMode,
        weights: LossWeights,
        quadrature_order: usize,
    ) -> Result<Self> {
        ic.validate()?;
        weights.validate()?;
        if ic.dim() != system.dim() {
            return Err(Error::Dimension {
                expected: system.dim(),
                got: ic.dim(),
            });
        }
        let quadrature = ElementQuadrature::new(quadrature_order, system.dim() + 1)?;
        Ok(Self {
            system,
            ic,
            bc_mode,
            weights,
            quadrature,
        })
    }

    fn ds(&self) -> usize {
        self.system.dim()
    }

    fn target(&self, s: &[f64]) -> f64 {
        self.ic.eval(&s[..self.ds()])
    }

    fn terms(&self, model: &Mlp, batch: &Batch, batch_id: usize) -> Result<Terms> {
        let d = self.ds() + 1;
        if model.input_dim() != d {
            return Err(Error::Dimension {
                expected: d,
                got: model.input_dim(),
            });
        }
        let ic_tapes = forward(model, &batch.ic, false);
        let ic_err: Vec<f64> = ic_tapes
            .iter()
            .flat_map(|t| t.values().iter().copied())
            .zip(batch.ic.iter())
            .map(|(v, s)| v - self.target(s))
            .collect();

        let (bc_tapes, bc_err) = match self.bc_mode {
            BcMode::Free => (Vec::new(), Vec::new()),
            BcMode::Fixed => {
                let tapes = forward(model, &batch.bc, false);
                let err = tapes
                    .iter()
                    .flat_map(|t| t.values().iter().copied())
                    .zip(batch.bc.iter())
                    .map(|(v, s)| v - self.target(s))
                    .collect();
                (tapes, err)
            }
        };

        let col = collocate(model, &self.system, &batch.collocation);
        let mon_err: Vec<f64> = col
            .tapes
            .iter()
            .flat_map(|t| t.values().iter().copied())
            .zip(batch.collocation.iter())
            .map(|(v, s)| (self.target(s) - v).min(0.0))
            .collect();
        let l_r = rss(col.data.iter().flat_map(|c| c.r.iter().copied()));

        let active: Vec<usize> = (0..batch.elements.len())
            .filter(|&j| !batch.elements[j].clipped)
            .collect();
        let nq = self.quadrature.rule.len();
        let nk = self.quadrature.mass.len();
        let (nodes, elem_first) = if self.quadrature.is_centre_rule()
            && batch.elements.len() == batch.collocation.len()
        {
            (None, active.clone())
        } else {
            let els: Vec<&Element> = active.iter().map(|&j| &batch.elements[j]).collect();
            let pts = self.quadrature.nodes_for(&els);
            let firsts = (0..els.len()).map(|e| e * nq).collect();
            (Some(collocate(model, &self.system, &pts)), firsts)
        };
        let node_r: Vec<f64> = match &nodes {
            Some(c) => c.data.iter().flat_map(|x| x.r.iter().copied()).collect(),
            None => col.data.iter().flat_map(|x| x.r.iter().copied()).collect(),
        };
        let elem_jac: Vec<f64> = active
            .iter()
            .map(|&j| (0.5 * batch.elements[j].sigma).powi(d as i32))
            .collect();
        let mut variations = vec![0.0; active.len() * nk];
        for (e, &first) in elem_first.iter().enumerate() {
            self.quadrature.variations(
                elem_jac[e],
                &node_r[first..first + nq],
                &mut variations[e * nk..(e + 1) * nk],
            );
        }

        let mut report = LossReport {
            l_ic: rss(ic_err.iter().copied()),
            l_bc: rss(bc_err.iter().copied()),
            l_mon: rss(mon_err.iter().copied()),
            l_r,
            l_v: rss(variations.iter().copied()),
            l_reg: model.regularization(),
            total: 0.0,
            n_ic: batch.ic.len(),
            n_bc: if self.bc_mode == BcMode::Fixed {
                batch.bc.len()
            } else {
                0
            },
            n_collocation: batch.collocation.len(),
            n_elements: active.len(),
        };
        for (name, v) in report.components() {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: name,
                    batch: batch_id,
                });
            }
        }
        report.total = report.weighted_total(&self.weights);
        Ok(Terms {
            report,
            ic_tapes,
            ic_err,
            bc_tapes,
            bc_err,
            col,
            mon_err,
            nodes,
            elem_first,
            elem_jac,
            variations,
        })
    }

    /// All six components and the weighted total; no gradients.
    pub fn report(&self, model: &Mlp, batch: &Batch) -> Result<LossReport> {
        Ok(self.terms(model, batch, 0)?.report)
    }

    /// Loss report and gradient of the weighted total with respect to the
    /// flattened parameters.
    pub fn gradient(
        &self,
        model: &Mlp,
        batch: &Batch,
        batch_id: usize,
    ) -> Result<(LossReport, Vec<f64>)> {
        let t = self.terms(model, batch, batch_id)?;
        let w = &self.weights;
        let ds = self.ds();
        let scale = |c: f64, l: f64| if l > 0.0 { c / l } else { 0.0 };

        let value_upstream = |tapes: &[Tape], err: &[f64], k: f64| -> Vec<Vec<f64>> {
            let mut at = 0;
            tapes
                .iter()
                .map(|tp| {
                    let n = tp.len();
                    let up: Vec<f64> = err[at..at + n].iter().map(|e| k * e).collect();
                    at += n;
                    up
                })
                .collect()
        };
        let mut grad = vec![0.0; model.num_params()];
        let mut add = |g: Vec<f64>| {
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        };

        let k_ic = scale(w.c_ic, t.report.l_ic);
        if k_ic != 0.0 {
            add(backward(
                model,
                &t.ic_tapes,
                &value_upstream(&t.ic_tapes, &t.ic_err, k_ic),
            ));
        }
        let k_bc = scale(w.c_bc, t.report.l_bc);
        if k_bc != 0.0 {
            add(backward(
                model,
                &t.bc_tapes,
                &value_upstream(&t.bc_tapes, &t.bc_err, k_bc),
            ));
        }

        // Collocation rows: monotonicity (values), residual and, for the
        // centre rule, variational terms (derivative rows).
        let k_mon = scale(w.c_mon, t.report.l_mon);
        let k_r = scale(w.c_r, t.report.l_r);
        let k_v = scale(w.c_v, t.report.l_v);
        let nk = self.quadrature.mass.len();
        let nq = self.quadrature.rule.len();

        // d L_v / d r at each quadrature node, laid out like the node residuals.
        let n_nodes = match &t.nodes {
            Some(c) => c.data.iter().map(|x| x.r.len()).sum(),
            None => batch.collocation.len(),
        };
        let mut node_alpha = vec![0.0; n_nodes];
        if k_v != 0.0 {
            for (e, &first) in t.elem_first.iter().enumerate() {
                let v = &t.variations[e * nk..(e + 1) * nk];
                for q in 0..nq {
                    let s: f64 = (0..nk).map(|k| v[k] * self.quadrature.mass[k][q]).sum();
                    node_alpha[first + q] += k_v * t.elem_jac[e] * s;
                }
            }
        }

        let mut col_up = Vec::with_capacity(t.col.tapes.len());
        let mut at = 0;
        for (tp, data) in t.col.tapes.iter().zip(&t.col.data) {
            let n = tp.len();
            let mut up = vec![0.0; tp.rows()];
            for i in 0..n {
                // mon error e = min(phi0 - phi, 0): de/dphi = -1 when active.
                if t.mon_err[at + i] < 0.0 {
                    up[i] -= k_mon * t.mon_err[at + i];
                }
            }
            let mut alpha: Vec<f64> = data.r.iter().map(|r| k_r * r).collect();
            if t.nodes.is_none() {
                for (a, na) in alpha.iter_mut().zip(&node_alpha[at..at + n]) {
                    *a += na;
                }
            }
            push_residual_upstream(&mut up, n, ds, data, &alpha);
            col_up.push(up);
            at += n;
        }
        add(backward(model, &t.col.tapes, &col_up));

        if let Some(nodes) = &t.nodes {
            let mut at = 0;
            let ups: Vec<Vec<f64>> = nodes
                .tapes
                .iter()
                .zip(&nodes.data)
                .map(|(tp, data)| {
                    let n = tp.len();
                    let mut up = vec![0.0; tp.rows()];
                    push_residual_upstream(&mut up, n, ds, data, &node_alpha[at..at + n]);
                    at += n;
                    up
                })
                .collect();
            add(backward(model, &nodes.tapes, &ups));
        }

        model.regularization_grad(w.c_reg, &mut grad);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                component: "gradient",
                batch: batch_id,
            });
        }
        Ok((t.report, grad))
    }
}

/// `sqrt(sum (phi0(x) - phi(x, 0))^2)` over IC points.
pub fn loss_ic(model: &Mlp, ic: &SigmoidIc, points: &PointSet) -> f64 {
    let ds = ic.dim();
    let v = model.eval_batch(points.as_flat());
    rss(v
        .iter()
        .zip(points.iter())
        .map(|(p, s)| ic.eval(&s[..ds]) - p))
}

/// Boundary term: fixed mode pins the boundary to `phi0(x)`; free mode is 0.
pub fn loss_bc(model: &Mlp, ic: &SigmoidIc, points: &PointSet, mode: BcMode) -> f64 {
    match mode {
        BcMode::Free => 0.0,
        BcMode::Fixed => loss_ic(model, ic, points),
    }
}

/// `sqrt(sum min(phi0(x) - phi(x, t), 0)^2)`: penalises values above the start.
pub fn loss_monotonicity(model: &Mlp, ic: &SigmoidIc, points: &PointSet) -> f64 {
    let ds = ic.dim();
    let v = model.eval_batch(points.as_flat());
    rss(v
        .iter()
        .zip(points.iter())
        .map(|(p, s)| (ic.eval(&s[..ds]) - p).min(0.0)))
}

/// `sqrt(sum r(s)^2)` over collocation points.
pub fn loss_residual(model: &Mlp, sys: &DynamicalSystem, points: &PointSet) -> f64 {
    let c = collocate(model, sys, points);
    rss(c.data.iter().flat_map(|x| x.r.iter().copied()))
}

/// `sqrt(sum_j sum_k v_jk^2)` over unclipped elements, `2^d` linear basis
/// functions each.
pub fn loss_variational(
    model: &Mlp,
    sys: &DynamicalSystem,
    elements: &[Element],
    quadrature: &ElementQuadrature,
) -> f64 {
    let active: Vec<&Element> = elements.iter().filter(|e| !e.clipped).collect();
    let pts = quadrature.nodes_for(&active);
    let r: Vec<f64> = collocate(model, sys, &pts)
        .data
        .into_iter()
        .flat_map(|x| x.r)
        .collect();
    let nq = quadrature.rule.len();
    let nk = quadrature.mass.len();
    let mut v = vec![0.0; nk];
    let mut sum = 0.0;
    for (e, el) in active.iter().enumerate() {
        let jac = (0.5 * el.sigma).powi(el.center.len() as i32);
        quadrature.variations(jac, &r[e * nq..(e + 1) * nq], &mut v);
        sum += v.iter().map(|x| x * x).sum::<f64>();
    }
    sum.sqrt()
}

pub fn loss_regularization(model: &Mlp) -> f64 {
    model.regularization()
}
