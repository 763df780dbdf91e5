//! Autonomous flows `x' = f(x)`, the benchmark systems, and fixed-step RK4
//! trajectories used by the Monte-Carlo oracle.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Standard gravity, positive so that the hanging position is stable.
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    /// Bob mass (kg).
    pub m: f64,
    /// Viscous damping (N s/m).
    pub c: f64,
    /// Length (m).
    pub l: f64,
    /// Gravitational acceleration (m/s^2).
    pub g: f64,
}

impl PendulumParams {
    /// Mass/damping/length rows of the warm-start variations.
    pub fn variation_a() -> Self {
        Self {
            m: 0.127,
            c: 0.0024,
            l: 0.2,
            g: GRAVITY,
        }
    }

    pub fn variation_b() -> Self {
        Self {
            l: 0.3,
            ..Self::variation_a()
        }
    }

    pub fn variation_c() -> Self {
        Self {
            l: 0.4,
            ..Self::variation_a()
        }
    }

    /// The lighter bob described alongside the original pendulum example.
    pub fn light_bob() -> Self {
        Self {
            m: 0.097,
            ..Self::variation_a()
        }
    }

    /// Mechanical energy `1/2 m L^2 w^2 - m g L cos(theta)`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        0.5 * self.m * self.l * self.l * x[1] * x[1] - self.m * self.g * self.l * x[0].cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPendulumParams {
    pub m1: f64,
    pub m2: f64,
    pub c1: f64,
    pub c2: f64,
    pub k1: f64,
    pub k2: f64,
    pub l: f64,
    pub g: f64,
}

impl Default for CartPendulumParams {
    fn default() -> Self {
        Self {
            m1: 0.257,
            m2: 0.127,
            c1: 0.0024,
            c2: 0.0024,
            k1: 0.1,
            k2: 0.0,
            l: 0.3365,
            g: GRAVITY,
        }
    }
}

/// The closed-form flow behind a [`DynamicalSystem`].
#[derive(Debug, Clone, PartialEq)]
pub enum Flow {
    /// Periodic lattice of equilibria with a closed basin around `(pi/2, pi/2)`.
    ClosedRoa,
    Pendulum(PendulumParams),
    /// State `(cart position, cart velocity, angle, angular velocity)`.
    CartPendulum(CartPendulumParams),
    /// `f(x) = -rate * x` in any dimension.
    LinearDecay {
        rate: f64,
        dim: usize,
    },
    /// `f = 0`; every state is an equilibrium.
    Zero {
        dim: usize,
    },
}

impl Flow {
    fn dim(&self) -> usize {
        match self {
            Flow::ClosedRoa | Flow::Pendulum(_) => 2,
            Flow::CartPendulum(_) => 4,
            Flow::LinearDecay { dim, .. } | Flow::Zero { dim } => *dim,
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Flow::ClosedRoa => {
                let (s1, c1) = x[0].sin_cos();
                let (s2, c2) = x[1].sin_cos();
                out[0] = -s1 * (-0.1 * c1 - c2);
                out[1] = -s2 * (c1 - 0.1 * c2);
            }
            Flow::Pendulum(p) => {
                out[0] = x[1];
                out[1] = -(p.g / p.l) * x[0].sin() - p.c / (p.m * p.l * p.l) * x[1];
            }
            Flow::CartPendulum(p) => {
                let (s3, c3) = x[2].sin_cos();
                let mt = p.m1 + p.m2;
                let den = 4.0 * mt - 3.0 * p.m2 * c3 * c3;
                out[0] = x[1];
                out[1] = (6.0 * p.c2 * x[3] * c3 + 6.0 * p.k2 * x[2] * c3
                    - 4.0 * p.l * p.c1 * x[1]
                    - 4.0 * p.l * p.k1 * x[0]
                    + 2.0 * p.l * p.l * p.m2 * x[3] * x[3] * s3
                    + 3.0 * p.m2 * p.g * p.l * c3 * s3)
                    / (p.l * den);
                out[2] = x[3];
                out[3] = -(-6.0 * p.m2 * p.l * c3 * (p.k1 * x[0] + p.c1 * x[1])
                    + 12.0 * mt * (p.k2 * x[2] + p.c2 * x[3])
                    + 1.5 * p.m2 * p.m2 * p.l * p.l * (2.0 * x[2]).sin() * x[3] * x[3]
                    + 6.0 * p.m2 * mt * p.g * p.l * s3)
                    / (p.m2 * p.l * p.l * den);
            }
            Flow::LinearDecay { rate, .. } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -rate * xi;
                }
            }
            Flow::Zero { .. } => out.fill(0.0),
        }
    }
}

/// An autonomous system with a distinguished equilibrium.
///
/// `offset` implements the optional recentring: when set, the system is
/// evaluated as `g(y) = f(y + offset)`, which moves the equilibrium to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicalSystem {
    pub name: String,
    pub flow: Flow,
    equilibrium: Vec<f64>,
    offset: Option<Vec<f64>>,
}

pub const PRESETS: &[&str] = &[
    "closed_roa",
    "pendulum_a",
    "pendulum_b",
    "pendulum_c",
    "pendulum_light",
    "cart_pendulum",
    "linear_1d",
    "zero_2d",
];

impl DynamicalSystem {
    pub fn new(name: impl Into<String>, flow: Flow, equilibrium: Vec<f64>) -> Result<Self> {
        check_dim(flow.dim(), equilibrium.len())?;
        let sys = Self {
            name: name.into(),
            flow,
            equilibrium,
            offset: None,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Builds a named preset with optional parameter overrides.
    pub fn preset(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut flow = match name {
            "closed_roa" => Flow::ClosedRoa,
            "pendulum_a" => Flow::Pendulum(PendulumParams::variation_a()),
            "pendulum_b" => Flow::Pendulum(PendulumParams::variation_b()),
            "pendulum_c" => Flow::Pendulum(PendulumParams::variation_c()),
            "pendulum_light" => Flow::Pendulum(PendulumParams::light_bob()),
            "cart_pendulum" => Flow::CartPendulum(CartPendulumParams::default()),
            "linear_1d" => Flow::LinearDecay { rate: 1.0, dim: 1 },
            "zero_2d" => Flow::Zero { dim: 2 },
            other => {
                return Err(Error::Config(format!(
                    "unknown system preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        for (key, &value) in overrides {
            let slot = match (&mut flow, key.as_str()) {
                (Flow::Pendulum(p), "m") => &mut p.m,
                (Flow::Pendulum(p), "c") => &mut p.c,
                (Flow::Pendulum(p), "L") => &mut p.l,
                (Flow::Pendulum(p), "g") => &mut p.g,
                (Flow::CartPendulum(p), "m1") => &mut p.m1,
                (Flow::CartPendulum(p), "m2") => &mut p.m2,
                (Flow::CartPendulum(p), "c1") => &mut p.c1,
                (Flow::CartPendulum(p), "c2") => &mut p.c2,
                (Flow::CartPendulum(p), "k1") => &mut p.k1,
                (Flow::CartPendulum(p), "k2") => &mut p.k2,
                (Flow::CartPendulum(p), "L") => &mut p.l,
                (Flow::CartPendulum(p), "g") => &mut p.g,
                (Flow::LinearDecay { rate, .. }, "rate") => rate,
                _ => {
                    return Err(Error::Config(format!(
                        "system {name:?} has no parameter {key:?}"
                    )))
                }
            };
            *slot = value;
        }
        let equilibrium = match flow {
            Flow::ClosedRoa => vec![FRAC_PI_2, FRAC_PI_2],
            _ => vec![0.0; flow.dim()],
        };
        Self::new(name, flow, equilibrium)
    }

    fn validate(&self) -> Result<()> {
        let params = self.params();
        if let Some((k, v)) = params.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Config(format!("parameter {k} = {v} is not finite")));
        }
        let positive: &[&str] = match self.flow {
            Flow::Pendulum(_) => &["m", "L"],
            Flow::CartPendulum(_) => &["m1", "m2", "L"],
            _ => &[],
        };
        for key in positive {
            if params[*key] <= 0.0 {
                return Err(Error::Config(format!("parameter {key} must be positive")));
            }
        }
        let f = self.eval_flow(&self.equilibrium)?;
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-9 {
            return Err(Error::Config(format!(
                "{:?} is not an equilibrium of {} (|f| = {norm:e})",
                self.equilibrium, self.name
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn equilibrium(&self) -> &[f64] {
        &self.equilibrium
    }

    /// Named parameters, keyed as accepted by [`DynamicalSystem::preset`].
    pub fn params(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match &self.flow {
            Flow::Pendulum(p) => vec![("m", p.m), ("c", p.c), ("L", p.l), ("g", p.g)],
            Flow::CartPendulum(p) => vec![
                ("m1", p.m1),
                ("m2", p.m2),
                ("c1", p.c1),
                ("c2", p.c2),
                ("k1", p.k1),
                ("k2", p.k2),
                ("L", p.l),
                ("g", p.g),
            ],
            Flow::LinearDecay { rate, .. } => vec![("rate", *rate)],
            Flow::ClosedRoa | Flow::Zero { .. } => vec![],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Returns a copy whose coordinates are shifted so the equilibrium sits at the origin.
    pub fn recentered(&self) -> Self {
        let mut out = self.clone();
        let shift: Vec<f64> = match &self.offset {
            Some(o) => o
                .iter()
                .zip(&self.equilibrium)
                .map(|(a, b)| a + b)
                .collect(),
            None => self.equilibrium.clone(),
        };
        out.offset = Some(shift);
        out.equilibrium = vec![0.0; self.dim()];
        out
    }

    /// Writes `f(x)` into `out` without allocating. Slices must have length `dim()`.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.offset {
            None => self.flow.eval(x, out),
            Some(o) => {
                let mut y = [0.0; 8];
                let n = x.len();
                for i in 0..n {
                    y[i] = x[i] + o[i];
                }
                self.flow.eval(&y[..n], out)
            }
        }
    }

    pub fn eval_flow(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, &mut out);
        Ok(out)
    }

    /// One classical RK4 step in place. `work` must hold `5 * dim` values.
    pub fn rk4_step(&self, x: &mut [f64], dt: f64, work: &mut [f64]) {
        let n = x.len();
        let (k1, rest) = work.split_at_mut(n);
        let (k2, rest) = rest.split_at_mut(n);
        let (k3, rest) = rest.split_at_mut(n);
        let (k4, tmp) = rest.split_at_mut(n);
        let tmp = &mut tmp[..n];
        self.eval_into(x, k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        self.eval_into(tmp, k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        self.eval_into(tmp, k3);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        self.eval_into(tmp, k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Integration horizon and termination rules for trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Radius of the convergence ball around the equilibrium.
    pub r_conv: f64,
    /// Leaving this box counts as escape; `None` means unbounded.
    pub bounds: Option<Vec<[f64; 2]>>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 50.0,
            r_conv: 0.05,
            bounds: None,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.dt > 0.0 && self.t_end > 0.0 && self.r_conv > 0.0) {
            return Err(Error::Config(
                "trajectory dt, t_end and r_conv must be positive".into(),
            ));
        }
        if let Some(b) = &self.bounds {
            check_dim(dim, b.len())?;
        }
        Ok(())
    }
}

/// Why a trajectory stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Reached `t_end`.
    Horizon,
    EnteredBall,
    LeftBounds,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }

    /// True when a non-finite state was produced (classified unstable).
    pub fn diverged(&self) -> bool {
        self.termination == Termination::NonFinite
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn outside(x: &[f64], bounds: &Option<Vec<[f64; 2]>>) -> bool {
    match bounds {
        Some(b) => x.iter().zip(b).any(|(v, [lo, hi])| v < lo || v > hi),
        None => false,
    }
}

fn step_count(dt: f64, t_end: f64) -> usize {
    // Guard against 50.0 / 1e-3 = 49999.99...
    (t_end / dt - 1e-9).ceil() as usize
}

/// RK4 trajectory from `x0`, stopping at `t_end`, on leaving the box, or on
/// entering the convergence ball.
pub fn integrate_trajectory(
    sys: &DynamicalSystem,
    x0: &[f64],
    cfg: &TrajectoryConfig,
) -> Result<Trajectory> {
    check_dim(sys.dim(), x0.len())?;
    cfg.validate(sys.dim())?;
    let mut x = x0.to_vec();
    let mut work = vec![0.0; 5 * x.len()];
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut termination = Termination::Horizon;
    for k in 1..=step_count(cfg.dt, cfg.t_end) {
        sys.rk4_step(&mut x, cfg.dt, &mut work);
        times.push(k as f64 * cfg.dt);
        states.push(x.clone());
        if x.iter().any(|v| !v.is_finite()) {
            termination = Termination::NonFinite;
            break;
        }
        if outside(&x, &cfg.bounds) {
            termination = Termination::LeftBounds;
            break;
        }
        if distance(&x, sys.equilibrium()) < cfg.r_conv {
            termination = Termination::EnteredBall;
            break;
        }
    }
    Ok(Trajectory {
        times,
        states,
        termination,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Converged,
    Escaped,
    Undecided,
}

/// Trajectory-based membership test for the region of attraction.
///
/// Converged means the state enters the ball and stays there until `t_end`;
/// escaped means it leaves the box (or blows up). Anything else is undecided.
pub fn classify_stability(
    sys: &DynamicalSystem,
    x0: &[f64],
    cfg: &TrajectoryConfig,
) -> Result<Stability> {
    check_dim(sys.dim(), x0.len())?;
    cfg.validate(sys.dim())?;
    let eq = sys.equilibrium();
    let mut x = x0.to_vec();
    let mut work = vec![0.0; 5 * x.len()];
    let mut inside = distance(&x, eq) < cfg.r_conv;
    for _ in 0..step_count(cfg.dt, cfg.t_end) {
        sys.rk4_step(&mut x, cfg.dt, &mut work);
        if x.iter().any(|v| !v.is_finite()) || outside(&x, &cfg.bounds) {
            return Ok(Stability::Escaped);
        }
        inside = distance(&x, eq) < cfg.r_conv;
    }
    Ok(if inside {
        Stability::Converged
    } else {
        Stability::Undecided
    })
}
