//! Zero-level-set extraction on 2D lattices, membership comparison, and the
//! trajectory-based membership field.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{classify_stability, DynamicalSystem, Stability, TrajectoryConfig};
use crate::error::{check_dim, Error, Result};
use crate::network::Mlp;
use crate::numeric::GridField;

pub const SCHEMA: &str = "roa-estimate/1";

/// Anything that evaluates `u(x)` at full state vectors.
pub trait FieldProvider: Sync {
    fn state_dim(&self) -> usize;
    /// Values at `points`, given flat with `state_dim` entries per point.
    fn eval_points(&self, points: &[f64]) -> Vec<f64>;
}

/// `phi(x, t)` of a trained network at a fixed time.
pub struct NetworkField<'a> {
    pub model: &'a Mlp,
    pub t: f64,
}

impl FieldProvider for NetworkField<'_> {
    fn state_dim(&self) -> usize {
        self.model.input_dim() - 1
    }

    fn eval_points(&self, points: &[f64]) -> Vec<f64> {
        let d = self.state_dim();
        let mut s = Vec::with_capacity(points.len() / d * (d + 1));
        for x in points.chunks_exact(d) {
            s.extend_from_slice(x);
            s.push(self.t);
        }
        self.model.eval_batch(&s)
    }
}

impl GridField {
    /// Multilinear interpolation; points outside the box are clamped to it.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = 0usize;
        let mut frac = [0.0; 8];
        for k in 0..d {
            let n = self.shape[k];
            let u = ((x[k] - self.bounds[k][0]) / self.spacing(k)).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n - 2);
            frac[k] = u - i as f64;
            base += i * self.stride(k);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = base;
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    off += self.stride(k);
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                acc += w * self.values[off];
            }
        }
        acc
    }
}

impl FieldProvider for GridField {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn eval_points(&self, points: &[f64]) -> Vec<f64> {
        points
            .par_chunks(self.dim())
            .map(|x| self.interpolate(x))
            .collect()
    }
}

/// A 2D lattice through state space: two plotted axes, every other state
/// variable held at `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    /// Indices of the plotted state variables.
    pub axes: [usize; 2],
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    /// Full state template; entries at `axes` are overwritten.
    pub base: Vec<f64>,
}

impl Lattice {
    /// Lattice over the first two axes of a 2D box.
    pub fn planar(bounds: &[[f64; 2]], nx: usize, ny: usize) -> Result<Self> {
        check_dim(2, bounds.len())?;
        let l = Self {
            axes: [0, 1],
            x: bounds[0],
            y: bounds[1],
            nx,
            ny,
            base: vec![0.0; 2],
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Config(
                "evaluation lattice needs at least 2 nodes per axis".into(),
            ));
        }
        if !(self.x[0] < self.x[1] && self.y[0] < self.y[1]) {
            return Err(Error::Config("lattice ranges must be increasing".into()));
        }
        let d = self.base.len();
        if self.axes[0] == self.axes[1] || self.axes.iter().any(|&a| a >= d) {
            return Err(Error::Config(format!(
                "slice axes {:?} invalid for dimension {d}",
                self.axes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        (self.x[1] - self.x[0]) / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y[1] - self.y[0]) / (self.ny - 1) as f64
    }

    pub fn xi(&self, i: usize) -> f64 {
        self.x[0] + i as f64 * self.dx()
    }

    pub fn yj(&self, j: usize) -> f64 {
        self.y[0] + j as f64 * self.dy()
    }

    /// Flat index with `j` (the second axis) fastest.
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    /// Full state at lattice node `(i, j)`.
    pub fn state(&self, i: usize, j: usize) -> Vec<f64> {
        let mut s = self.base.clone();
        s[self.axes[0]] = self.xi(i);
        s[self.axes[1]] = self.yj(j);
        s
    }

    pub fn states_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.base.len());
        for i in 0..self.nx {
            for j in 0..self.ny {
                out.extend(self.state(i, j));
            }
        }
        out
    }

    fn same_slice(&self, other: &Self) -> bool {
        if self.axes != other.axes || self.base.len() != other.base.len() {
            return false;
        }
        (0..self.base.len())
            .filter(|k| !self.axes.contains(k))
            .all(|k| (self.base[k] - other.base[k]).abs() <= 1e-12 * (1.0 + self.base[k].abs()))
    }
}

pub type Polyline = Vec<[f64; 2]>;

/// Sampled implicit function with its zero-level contours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoaEstimate {
    pub schema: String,
    pub lattice: Lattice,
    pub t_snapshot: f64,
    pub values: Vec<f64>,
    pub contours: Vec<Polyline>,
}

impl RoaEstimate {
    pub fn from_values(lattice: Lattice, t_snapshot: f64, values: Vec<f64>) -> Result<Self> {
        lattice.validate()?;
        if values.len() != lattice.len() {
            return Err(Error::Shape(format!(
                "{} values for a {}-node lattice",
                values.len(),
                lattice.len()
            )));
        }
        let contours = marching_squares(&lattice, &values);
        Ok(Self {
            schema: SCHEMA.into(),
            lattice,
            t_snapshot,
            values,
            contours,
        })
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[self.lattice.index(i, j)]
    }

    pub fn is_member(&self, i: usize, j: usize) -> bool {
        self.value(i, j) <= 0.0
    }

    pub fn membership(&self) -> Vec<bool> {
        self.values.iter().map(|v| *v <= 0.0).collect()
    }

    pub fn member_count(&self) -> usize {
        self.values.iter().filter(|v| **v <= 0.0).count()
    }

    /// Bilinear interpolation in the plotted plane; `None` outside the lattice.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let l = &self.lattice;
        let tol = 1e-9;
        let u = (x - l.x[0]) / l.dx();
        let v = (y - l.y[0]) / l.dy();
        if u < -tol || v < -tol || u > (l.nx - 1) as f64 + tol || v > (l.ny - 1) as f64 + tol {
            return None;
        }
        let u = u.clamp(0.0, (l.nx - 1) as f64);
        let v = v.clamp(0.0, (l.ny - 1) as f64);
        let i = (u.floor() as usize).min(l.nx - 2);
        let j = (v.floor() as usize).min(l.ny - 2);
        let (fu, fv) = (u - i as f64, v - j as f64);
        Some(
            (1.0 - fu) * (1.0 - fv) * self.value(i, j)
                + fu * (1.0 - fv) * self.value(i + 1, j)
                + fu * fv * self.value(i + 1, j + 1)
                + (1.0 - fu) * fv * self.value(i, j + 1),
        )
    }

    /// Closed contours enclosing `p` (plotted coordinates).
    pub fn closed_contours_around(&self, p: [f64; 2]) -> usize {
        self.contours
            .iter()
            .filter(|c| is_closed(c) && point_in_polygon(c, p))
            .count()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let est: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if est.schema != SCHEMA {
            return Err(Error::Config(format!(
                "{}: schema {:?}, expected {SCHEMA:?}",
                path.display(),
                est.schema
            )));
        }
        est.lattice.validate()?;
        if est.values.len() != est.lattice.len() {
            return Err(Error::Shape(format!(
                "{}: value count does not match lattice",
                path.display()
            )));
        }
        Ok(est)
    }

    /// `x,y,u` rows, one per lattice node.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(w, "x,y,u")?;
        for i in 0..self.lattice.nx {
            for j in 0..self.lattice.ny {
                writeln!(
                    w,
                    "{:e},{:e},{:e}",
                    self.lattice.xi(i),
                    self.lattice.yj(j),
                    self.value(i, j)
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples the provider on the lattice and extracts the zero contours.
pub fn extract_roa(
    field: &dyn FieldProvider,
    lattice: &Lattice,
    t_snapshot: f64,
) -> Result<RoaEstimate> {
    lattice.validate()?;
    check_dim(field.state_dim(), lattice.base.len())?;
    let values = field.eval_points(&lattice.states_flat());
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "non-finite field value on the evaluation lattice".into(),
        ));
    }
    RoaEstimate::from_values(lattice.clone(), t_snapshot, values)
}

pub fn is_closed(c: &Polyline) -> bool {
    c.len() > 3 && c.first() == c.last()
}

/// Even-odd ray test.
pub fn point_in_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for k in 0..n {
        let a = poly[k];
        let b = poly[(k + 1) % n];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Zero contours of `values` (inside means `<= 0`), joined into polylines.
/// Closed polylines repeat their first point at the end.
pub fn marching_squares(l: &Lattice, values: &[f64]) -> Vec<Polyline> {
    let (nx, ny) = (l.nx, l.ny);
    let v = |i: usize, j: usize| values[i * ny + j];
    // Edge ids: even for edges along x from (i, j), odd for edges along y.
    let h = |i: usize, j: usize| 2 * (i * ny + j);
    let vert = |i: usize, j: usize| 2 * (i * ny + j) + 1;
    let crossing = |a: f64, b: f64| {
        if a == b {
            0.5
        } else {
            (a / (a - b)).clamp(0.0, 1.0)
        }
    };
    let mut points: HashMap<usize, [f64; 2]> = HashMap::new();
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    let link = |a: usize, b: usize, adj: &mut HashMap<usize, Vec<usize>>| {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    };
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            // Corners counter-clockwise from (i, j); edge k joins corner k
            // and corner k + 1.
            let c = [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)];
            let inside = c.map(|x| x <= 0.0);
            let edges = [h(i, j), vert(i + 1, j), h(i, j + 1), vert(i, j)];
            let cut: Vec<usize> = (0..4)
                .filter(|&k| inside[k] != inside[(k + 1) % 4])
                .collect();
            if cut.is_empty() {
                continue;
            }
            for &k in &cut {
                let (a, b) = (k, (k + 1) % 4);
                let t = crossing(c[a], c[b]);
                let corner = |m: usize| match m {
                    0 => [l.xi(i), l.yj(j)],
                    1 => [l.xi(i + 1), l.yj(j)],
                    2 => [l.xi(i + 1), l.yj(j + 1)],
                    _ => [l.xi(i), l.yj(j + 1)],
                };
                let (pa, pb) = (corner(a), corner(b));
                points.insert(
                    edges[k],
                    [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])],
                );
            }
            if cut.len() == 2 {
                link(edges[cut[0]], edges[cut[1]], &mut adj);
            } else {
                // Saddle: the centre takes the sign of the corner average and
                // the corners of the opposite kind are cut off individually.
                let centre_inside = c.iter().sum::<f64>() / 4.0 <= 0.0;
                for m in 0..4 {
                    if inside[m] != centre_inside {
                        // Corner m touches edges m - 1 and m.
                        link(edges[(m + 3) % 4], edges[m], &mut adj);
                    }
                }
            }
        }
    }

    let mut keys: Vec<usize> = adj.keys().copied().collect();
    keys.sort_unstable();
    let mut visited: HashMap<usize, bool> = HashMap::new();
    let mut lines = Vec::new();
    let walk = |start: usize, visited: &mut HashMap<usize, bool>| {
        let mut line = vec![points[&start]];
        visited.insert(start, true);
        let (mut prev, mut cur) = (usize::MAX, start);
        loop {
            let next = adj[&cur]
                .iter()
                .copied()
                .find(|&n| n != prev && !visited.get(&n).copied().unwrap_or(false));
            match next {
                Some(n) => {
                    visited.insert(n, true);
                    line.push(points[&n]);
                    prev = cur;
                    cur = n;
                }
                None => {
                    if cur != start && adj[&cur].contains(&start) && line.len() > 2 {
                        line.push(points[&start]);
                    }
                    break;
                }
            }
        }
        line
    };
    // Open chains start at degree-one edges; the rest are loops.
    for &k in &keys {
        if adj[&k].len() == 1 && !visited.contains_key(&k) {
            lines.push(walk(k, &mut visited));
        }
    }
    for &k in &keys {
        if !visited.contains_key(&k) {
            lines.push(walk(k, &mut visited));
        }
    }
    lines
}

/// Outcome of comparing two membership fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub agreement: f64,
    pub compared: usize,
    pub excluded: usize,
    pub band_cells: usize,
    /// Area of the symmetric difference over the whole lattice.
    pub symmetric_difference: f64,
    pub area_a: f64,
    pub area_b: f64,
}

/// Membership of `b` resampled onto the lattice of `a` by bilinear
/// interpolation.
pub fn resample_onto(a: &RoaEstimate, b: &RoaEstimate) -> Result<Vec<f64>> {
    if !a.lattice.same_slice(&b.lattice) {
        return Err(Error::Config("estimates lie on different slices".into()));
    }
    let l = &a.lattice;
    let mut out = Vec::with_capacity(l.len());
    for i in 0..l.nx {
        for j in 0..l.ny {
            let v = b.sample(l.xi(i), l.yj(j)).ok_or_else(|| {
                Error::Config(format!(
                    "lattice point ({}, {}) lies outside the second estimate's domain",
                    l.xi(i),
                    l.yj(j)
                ))
            })?;
            out.push(v);
        }
    }
    Ok(out)
}

/// Agreement of `u <= 0` between `a` and `b` on `a`'s lattice, skipping
/// nodes whose `(2 band + 1)^2` neighbourhood holds both memberships in
/// either field.
pub fn compare(a: &RoaEstimate, b: &RoaEstimate, band: usize) -> Result<CompareReport> {
    let bv = resample_onto(a, b)?;
    let l = &a.lattice;
    let ma = a.membership();
    let mb: Vec<bool> = bv.iter().map(|v| *v <= 0.0).collect();
    let mixed = |m: &[bool], i: usize, j: usize| {
        let first = m[l.index(i, j)];
        for ii in i.saturating_sub(band)..=(i + band).min(l.nx - 1) {
            for jj in j.saturating_sub(band)..=(j + band).min(l.ny - 1) {
                if m[l.index(ii, jj)] != first {
                    return true;
                }
            }
        }
        false
    };
    let (mut agree, mut compared, mut mismatched) = (0usize, 0usize, 0usize);
    for i in 0..l.nx {
        for j in 0..l.ny {
            let k = l.index(i, j);
            if ma[k] != mb[k] {
                mismatched += 1;
            }
            if band > 0 && (mixed(&ma, i, j) || mixed(&mb, i, j)) {
                continue;
            }
            compared += 1;
            if ma[k] == mb[k] {
                agree += 1;
            }
        }
    }
    if compared == 0 {
        return Err(Error::Numerical(format!(
            "every lattice node lies within {band} cells of a boundary"
        )));
    }
    let cell = l.dx() * l.dy();
    Ok(CompareReport {
        agreement: agree as f64 / compared as f64,
        compared,
        excluded: l.len() - compared,
        band_cells: band,
        symmetric_difference: mismatched as f64 * cell,
        area_a: ma.iter().filter(|m| **m).count() as f64 * cell,
        area_b: mb.iter().filter(|m| **m).count() as f64 * cell,
    })
}

/// Membership field from trajectory classification: `-1` where the
/// trajectory converges, `+1` otherwise.
pub fn trajectory_membership(
    sys: &DynamicalSystem,
    lattice: &Lattice,
    cfg: &TrajectoryConfig,
) -> Result<RoaEstimate> {
    lattice.validate()?;
    check_dim(sys.dim(), lattice.base.len())?;
    cfg.validate(sys.dim())?;
    let states: Vec<Vec<f64>> = (0..lattice.nx)
        .flat_map(|i| (0..lattice.ny).map(move |j| (i, j)))
        .map(|(i, j)| lattice.state(i, j))
        .collect();
    let values = states
        .par_iter()
        .map(|x| {
            classify_stability(sys, x, cfg)
                .map(|s| if s == Stability::Converged { -1.0 } else { 1.0 })
        })
        .collect::<Result<Vec<f64>>>()?;
    RoaEstimate::from_values(lattice.clone(), cfg.t_end, values)
}
