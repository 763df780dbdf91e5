//! Space-time boxes, training point generation, elements and minibatches.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat storage for a set of points of equal dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values cannot be split into points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.dim);
        self.data.extend_from_slice(p);
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        let mut out = Self {
            dim: self.dim,
            data: Vec::with_capacity(idx.len() * self.dim),
        };
        for &i in idx {
            out.push(self.point(i));
        }
        out
    }

    pub fn extend(&mut self, other: &PointSet) {
        debug_assert_eq!(self.dim, other.dim);
        self.data.extend_from_slice(&other.data);
    }
}

/// A spatial box times `[0, t_max]`, with the grid spacings used for the
/// fixed part of the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalDomain {
    pub bounds: Vec<[f64; 2]>,
    pub t_max: f64,
    pub dx: Vec<f64>,
    pub dt_grid: f64,
}

impl SpatioTemporalDomain {
    pub fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() {
            return Err(Error::Config(
                "domain needs at least one spatial dimension".into(),
            ));
        }
        if self.dx.len() != self.bounds.len() {
            return Err(Error::Config(format!(
                "dx has {} entries for {} spatial dimensions",
                self.dx.len(),
                self.bounds.len()
            )));
        }
        for (k, [lo, hi]) in self.bounds.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!(
                    "bounds[{k}] = [{lo}, {hi}] is empty"
                )));
            }
        }
        if !(self.t_max > 0.0) || !(self.dt_grid > 0.0) || self.dx.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Config(
                "t_max and grid spacings must be positive".into(),
            ));
        }
        for k in 0..=self.spatial_dim() {
            if self.axis_nodes(k) < 2 {
                return Err(Error::Config(format!(
                    "axis {k} spacing leaves fewer than 2 grid nodes"
                )));
            }
        }
        Ok(())
    }

    pub fn spatial_dim(&self) -> usize {
        self.bounds.len()
    }

    /// Space-time dimension `d_s + 1`.
    pub fn dim(&self) -> usize {
        self.bounds.len() + 1
    }

    /// Lower and upper bound of axis `k`; axis `d_s` is time.
    pub fn axis_range(&self, k: usize) -> (f64, f64) {
        if k < self.spatial_dim() {
            (self.bounds[k][0], self.bounds[k][1])
        } else {
            (0.0, self.t_max)
        }
    }

    fn axis_step(&self, k: usize) -> f64 {
        if k < self.spatial_dim() {
            self.dx[k]
        } else {
            self.dt_grid
        }
    }

    /// Nodes along axis `k`: the span divided into `round(span / step)`
    /// equal intervals, endpoints included.
    pub fn axis_nodes(&self, k: usize) -> usize {
        let (lo, hi) = self.axis_range(k);
        ((hi - lo) / self.axis_step(k)).round() as usize + 1
    }

    pub fn axis_coords(&self, k: usize) -> Vec<f64> {
        let (lo, hi) = self.axis_range(k);
        let n = self.axis_nodes(k);
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        (0..self.dim()).all(|k| {
            let (lo, hi) = self.axis_range(k);
            s[k] >= lo && s[k] <= hi
        })
    }

    pub fn on_spatial_boundary(&self, x: &[f64]) -> bool {
        self.bounds
            .iter()
            .zip(x)
            .any(|([lo, hi], v)| (v - lo).abs() <= 1e-12 || (v - hi).abs() <= 1e-12)
    }

    /// Space-time volume.
    pub fn volume(&self) -> f64 {
        (0..self.dim())
            .map(|k| {
                let (lo, hi) = self.axis_range(k);
                hi - lo
            })
            .product()
    }

    pub fn sample_uniform(&self, rng: &mut impl Rng, out: &mut [f64]) {
        for (k, v) in out.iter_mut().enumerate() {
            let (lo, hi) = self.axis_range(k);
            *v = rng.gen_range(lo..=hi);
        }
    }
}

/// An axis-aligned cube of side `sigma` centred on a collocation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub center: Vec<f64>,
    pub sigma: f64,
    /// The cube pokes out of the domain; such elements are left out of the
    /// variational loss.
    pub clipped: bool,
}

impl Element {
    pub fn volume(&self) -> f64 {
        self.sigma.powi(self.center.len() as i32)
    }

    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let d = self.center.len();
        let h = 0.5 * self.sigma;
        (0..1usize << d)
            .map(|bits| {
                (0..d)
                    .map(|j| {
                        let sign = if bits >> (d - 1 - j) & 1 == 0 {
                            -1.0
                        } else {
                            1.0
                        };
                        self.center[j] + sign * h
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn make_elements(
    points: &PointSet,
    sigma: f64,
    domain: &SpatioTemporalDomain,
) -> Result<Vec<Element>> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!(
            "element side length must be positive, got {sigma}"
        )));
    }
    let h = 0.5 * sigma;
    Ok(points
        .iter()
        .map(|c| {
            let clipped = (0..c.len()).any(|k| {
                let (lo, hi) = domain.axis_range(k);
                c[k] - h < lo - 1e-12 || c[k] + h > hi + 1e-12
            });
            Element {
                center: c.to_vec(),
                sigma,
                clipped,
            }
        })
        .collect())
}

/// How many random points supplement the grid in each set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RandomCounts {
    pub collocation: usize,
    pub ic: usize,
    pub bc: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSets {
    /// Points `(x, 0)`.
    pub ic: PointSet,
    /// Points with the spatial part on the box boundary, `t > 0`.
    pub bc: PointSet,
    pub collocation: PointSet,
    /// One element per collocation point, same order.
    pub elements: Vec<Element>,
}

impl TrainingSets {
    pub fn active_elements(&self) -> usize {
        self.elements.iter().filter(|e| !e.clipped).count()
    }
}

/// Grid points split into IC / BC / interior plus random supplements.
///
/// The IC slice is every spatial node at `t = 0`. BC points are spatial
/// boundary nodes at the remaining time levels; interior nodes at `t > 0` are
/// collocation points. Random IC points are uniform in the box at `t = 0`;
/// random BC points pick a face uniformly at random.
pub fn generate_training_sets(
    domain: &SpatioTemporalDomain,
    random: RandomCounts,
    sigma: f64,
    seed: u64,
) -> Result<TrainingSets> {
    domain.validate()?;
    let ds = domain.spatial_dim();
    let d = ds + 1;
    let coords: Vec<Vec<f64>> = (0..d).map(|k| domain.axis_coords(k)).collect();
    let counts: Vec<usize> = coords.iter().map(Vec::len).collect();
    let total: usize = counts.iter().product();

    let mut ic = PointSet::new(d);
    let mut bc = PointSet::new(d);
    let mut collocation = PointSet::new(d);
    let mut idx = vec![0usize; d];
    let mut s = vec![0.0; d];
    for _ in 0..total {
        let mut boundary = false;
        for k in 0..d {
            s[k] = coords[k][idx[k]];
            if k < ds && (idx[k] == 0 || idx[k] + 1 == counts[k]) {
                boundary = true;
            }
        }
        if idx[ds] == 0 {
            ic.push(&s);
        } else if boundary {
            bc.push(&s);
        } else {
            collocation.push(&s);
        }
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < counts[k] {
                break;
            }
            idx[k] = 0;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random.collocation {
        domain.sample_uniform(&mut rng, &mut s);
        collocation.push(&s);
    }
    for _ in 0..random.ic {
        domain.sample_uniform(&mut rng, &mut s);
        s[ds] = 0.0;
        ic.push(&s);
    }
    for _ in 0..random.bc {
        domain.sample_uniform(&mut rng, &mut s);
        let face = rng.gen_range(0..2 * ds);
        s[face / 2] = domain.bounds[face / 2][face % 2];
        bc.push(&s);
    }

    let elements = make_elements(&collocation, sigma, domain)?;
    Ok(TrainingSets {
        ic,
        bc,
        collocation,
        elements,
    })
}

fn focus_box(
    domain: &SpatioTemporalDomain,
    center: &[f64],
    half_width: f64,
) -> Result<Vec<(f64, f64)>> {
    let ds = domain.spatial_dim();
    if center.len() != ds {
        return Err(Error::Dimension {
            expected: ds,
            got: center.len(),
        });
    }
    let ranges: Vec<(f64, f64)> = (0..ds)
        .map(|k| {
            let (lo, hi) = domain.axis_range(k);
            (
                (center[k] - half_width).max(lo),
                (center[k] + half_width).min(hi),
            )
        })
        .collect();
    if ranges.iter().any(|(lo, hi)| lo > hi) {
        return Err(Error::Config("focus box does not meet the domain".into()));
    }
    Ok(ranges)
}

/// Appends `n` IC points drawn uniformly from the box `center ± half_width`
/// intersected with the spatial domain. Small initial sublevel sets in high
/// dimension otherwise receive next to no IC points.
pub fn add_focused_ic(
    sets: &mut TrainingSets,
    domain: &SpatioTemporalDomain,
    center: &[f64],
    half_width: f64,
    n: usize,
    seed: u64,
) -> Result<()> {
    let ranges = focus_box(domain, center, half_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = vec![0.0; ranges.len() + 1];
    for _ in 0..n {
        for (v, &(lo, hi)) in s.iter_mut().zip(&ranges) {
            *v = rng.gen_range(lo..=hi);
        }
        sets.ic.push(&s);
    }
    Ok(())
}

/// Appends `n` collocation points (with their elements) drawn uniformly from
/// the box `center ± half_width` over the whole time range.
pub fn add_focused_collocation(
    sets: &mut TrainingSets,
    domain: &SpatioTemporalDomain,
    center: &[f64],
    half_width: f64,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<()> {
    let ranges = focus_box(domain, center, half_width)?;
    let ds = ranges.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extra = PointSet::new(ds + 1);
    let mut s = vec![0.0; ds + 1];
    for _ in 0..n {
        for (v, &(lo, hi)) in s.iter_mut().zip(&ranges) {
            *v = rng.gen_range(lo..=hi);
        }
        s[ds] = rng.gen_range(0.0..=domain.t_max);
        extra.push(&s);
    }
    sets.elements.extend(make_elements(&extra, sigma, domain)?);
    for p in extra.iter() {
        sets.collocation.push(p);
    }
    Ok(())
}

/// Fractions of each set that go into one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinibatchSchedule {
    pub frac_ic_bc: f64,
    pub frac_collocation: f64,
    pub shuffle_seed: u64,
}

impl Default for MinibatchSchedule {
    fn default() -> Self {
        Self {
            frac_ic_bc: 0.5,
            frac_collocation: 0.05,
            shuffle_seed: 0,
        }
    }
}

impl MinibatchSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f <= 1.0;
        if !ok(self.frac_ic_bc) || !ok(self.frac_collocation) {
            return Err(Error::Config(
                "minibatch fractions must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        // The small tolerance keeps 1 / 0.05 from rounding up to 21.
        ((1.0 / self.frac_collocation) - 1e-9).ceil().max(1.0) as usize
    }

    fn subset_size(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            ((self.frac_ic_bc * n as f64).round() as usize).clamp(1, n)
        }
    }

    /// Random stream for `(epoch, batch)`; `batch = None` is the epoch shuffle.
    /// Counter-based, so any batch can be regenerated without replaying the
    /// ones before it.
    fn rng(&self, epoch: u64, batch: Option<usize>) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        let lane = batch.map_or(0, |b| b as u64 + 1);
        rng.set_stream((epoch << 24) | lane);
        rng
    }

    /// The epoch's permutation of the collocation set, split into
    /// `batches_per_epoch` contiguous chunks of near-equal size.
    pub fn collocation_partition(&self, n: usize, epoch: u64) -> Vec<Vec<usize>> {
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut self.rng(epoch, None));
        let nb = self.batches_per_epoch();
        (0..nb)
            .map(|b| perm[b * n / nb..(b + 1) * n / nb].to_vec())
            .collect()
    }
}

/// Gathered points for one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ic: PointSet,
    pub bc: PointSet,
    pub collocation: PointSet,
    pub elements: Vec<Element>,
}

impl Batch {
    /// A batch holding every point of `sets`.
    pub fn full(sets: &TrainingSets) -> Self {
        Self {
            ic: sets.ic.clone(),
            bc: sets.bc.clone(),
            collocation: sets.collocation.clone(),
            elements: sets.elements.clone(),
        }
    }
}

/// Minibatch `batch_index` of `epoch`. `partition` must come from
/// [`MinibatchSchedule::collocation_partition`] for the same epoch.
pub fn next_minibatch(
    sets: &TrainingSets,
    schedule: &MinibatchSchedule,
    partition: &[Vec<usize>],
    epoch: u64,
    batch_index: usize,
) -> Batch {
    let mut rng = schedule.rng(epoch, Some(batch_index));
    let mut pick = |n: usize| {
        let mut v = sample(&mut rng, n, schedule.subset_size(n)).into_vec();
        v.sort_unstable();
        v
    };
    let ic_idx = pick(sets.ic.len());
    let bc_idx = pick(sets.bc.len());
    let col = &partition[batch_index];
    Batch {
        ic: sets.ic.gather(&ic_idx),
        bc: sets.bc.gather(&bc_idx),
        collocation: sets.collocation.gather(col),
        elements: col.iter().map(|&i| sets.elements[i].clone()).collect(),
    }
}
