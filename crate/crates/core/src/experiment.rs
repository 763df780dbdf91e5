//! Experiment configuration files, shipped presets, and the end-to-end
//! pipelines shared by the command-line tool and the tests.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::domain::{
    add_focused_collocation, add_focused_ic, generate_training_sets, Batch, RandomCounts,
    SpatioTemporalDomain, TrainingSets,
};
use crate::dynamics::{DynamicalSystem, TrajectoryConfig};
use crate::error::{Error, Result};
use crate::losses::{BcMode, LossReport, LossWeights, Objective};
use crate::network::{default_layer_sizes, Mlp};
use crate::numeric::{solve_numeric, NumericConfig, Snapshot, SolveStats};
use crate::pde::SigmoidIc;
use crate::roa::{extract_roa, trajectory_membership, Lattice, NetworkField, RoaEstimate};
use crate::training::{train, AdamState, EpochEvent, TrainOutcome};

pub const CONFIG_VERSION: u32 = 1;

/// Names accepted by [`ExperimentConfig::preset`].
pub const EXPERIMENT_PRESETS: &[&str] = &[
    "ex1_closed_roa",
    "ex2a_pendulum",
    "ex2b_pendulum",
    "ex2c_pendulum",
    "ex3_cart_pendulum",
    "zero_flow_debug",
    "toy_1d",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub preset: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

/// Sigmoid constants; a missing centre means the system's equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcSpec {
    pub a: f64,
    pub m: f64,
    pub r: f64,
    pub c: f64,
    pub center: Option<Vec<f64>>,
    /// Extra IC points drawn from the box `center ± r`.
    pub focus_points: usize,
    /// Extra collocation points drawn from the box `center ± focus_width`
    /// over all times.
    pub focus_collocation: usize,
    pub focus_width: f64,
}

impl Default for IcSpec {
    fn default() -> Self {
        Self {
            a: 2.0,
            m: 20.0,
            r: 1.0,
            c: -1.0,
            center: None,
            focus_points: 0,
            focus_collocation: 0,
            focus_width: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    /// Map the domain box onto `[-1, 1]` before the first layer. Off feeds
    /// raw coordinates, which suits features much smaller than the box.
    pub scale_inputs: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50, 50],
            scale_inputs: true,
        }
    }
}

/// The evaluation set is built like the training set with its own seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub random: RandomCounts,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            random: RandomCounts {
                collocation: 2000,
                ic: 0,
                bc: 0,
            },
            seed: 1_000_003,
        }
    }
}

/// 2D evaluation slice; missing fields fall back to the domain box and the
/// equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSpec {
    pub axes: [usize; 2],
    pub nx: usize,
    pub ny: usize,
    pub x: Option<[f64; 2]>,
    pub y: Option<[f64; 2]>,
    pub base: Option<Vec<f64>>,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self {
            axes: [0, 1],
            nx: 61,
            ny: 61,
            x: None,
            y: None,
            base: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub system: SystemSpec,
    pub domain: SpatioTemporalDomain,
    #[serde(default)]
    pub random: RandomCounts,
    /// Element side length; defaults to the smallest grid spacing.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub ic: IcSpec,
    pub bc_mode: BcMode,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub training: crate::training::TrainingConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub lattice: LatticeSpec,
    #[serde(default)]
    pub numeric: NumericConfig,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
}

fn default_order() -> usize {
    1
}

fn pendulum_config(name: &str, preset: &str) -> ExperimentConfig {
    let bounds = vec![[-2.0 * PI, 2.0 * PI], [-4.0 * PI, 4.0 * PI]];
    ExperimentConfig {
        version: CONFIG_VERSION,
        name: name.into(),
        system: SystemSpec {
            preset: preset.into(),
            overrides: BTreeMap::new(),
        },
        domain: SpatioTemporalDomain {
            bounds,
            t_max: 10.0,
            dx: vec![0.6319; 2],
            dt_grid: 0.5263,
        },
        random: RandomCounts {
            collocation: 10_000,
            ic: 2000,
            bc: 0,
        },
        sigma: None,
        ic: IcSpec::default(),
        bc_mode: BcMode::Free,
        weights: LossWeights::default(),
        quadrature_order: 1,
        network: NetworkSpec::default(),
        training: Default::default(),
        seed: 0,
        eval: EvalSpec::default(),
        lattice: LatticeSpec::default(),
        numeric: NumericConfig {
            nodes: vec![241, 241],
            ..Default::default()
        },
        trajectory: TrajectoryConfig::default(),
    }
}

impl ExperimentConfig {
    /// One of the shipped experiments, see [`EXPERIMENT_PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "ex1_closed_roa" => Self {
                name: name.into(),
                system: SystemSpec {
                    preset: "closed_roa".into(),
                    overrides: BTreeMap::new(),
                },
                domain: SpatioTemporalDomain {
                    bounds: vec![[-1.0, 4.0], [-1.0, 4.0]],
                    t_max: 30.0,
                    dx: vec![0.6319; 2],
                    dt_grid: 0.5263,
                },
                bc_mode: BcMode::Fixed,
                random: RandomCounts {
                    collocation: 10_000,
                    ic: 2000,
                    bc: 1000,
                },
                numeric: NumericConfig {
                    nodes: vec![101, 101],
                    ..Default::default()
                },
                ..pendulum_config(name, "pendulum_a")
            },
            "ex2a_pendulum" => pendulum_config(name, "pendulum_a"),
            "ex2b_pendulum" => pendulum_config(name, "pendulum_b"),
            "ex2c_pendulum" => pendulum_config(name, "pendulum_c"),
            "ex3_cart_pendulum" => {
                let b = vec![[-2.0 * PI, 2.0 * PI], [-4.0 * PI, 4.0 * PI]];
                let mut cfg = pendulum_config(name, "cart_pendulum");
                cfg.domain = SpatioTemporalDomain {
                    bounds: vec![b[0], b[1], b[0], b[1]],
                    t_max: 10.0,
                    dx: vec![PI; 4],
                    dt_grid: 0.5263,
                };
                cfg.bc_mode = BcMode::Fixed;
                cfg.random = RandomCounts {
                    collocation: 10_000,
                    ic: 4000,
                    bc: 1000,
                };
                cfg.lattice = LatticeSpec {
                    axes: [2, 3],
                    ..Default::default()
                };
                cfg.ic.focus_points = 2000;
                cfg.network.scale_inputs = false;
                cfg.trajectory.r_conv = 0.5;
                cfg.numeric = NumericConfig {
                    nodes: vec![9; 4],
                    ..Default::default()
                };
                cfg
            }
            "zero_flow_debug" => Self {
                name: name.into(),
                system: SystemSpec {
                    preset: "zero_2d".into(),
                    overrides: BTreeMap::new(),
                },
                domain: SpatioTemporalDomain {
                    bounds: vec![[-2.0, 2.0], [-2.0, 2.0]],
                    t_max: 1.0,
                    dx: vec![0.25; 2],
                    dt_grid: 0.25,
                },
                random: RandomCounts {
                    collocation: 500,
                    ic: 200,
                    bc: 0,
                },
                bc_mode: BcMode::Fixed,
                numeric: NumericConfig {
                    nodes: vec![41, 41],
                    ..Default::default()
                },
                training: crate::training::TrainingConfig {
                    epochs: 200,
                    ..Default::default()
                },
                ..pendulum_config(name, "pendulum_a")
            },
            "toy_1d" => Self {
                name: name.into(),
                system: SystemSpec {
                    preset: "linear_1d".into(),
                    overrides: BTreeMap::new(),
                },
                domain: SpatioTemporalDomain {
                    bounds: vec![[-2.0, 2.0]],
                    t_max: 2.0,
                    dx: vec![0.1],
                    dt_grid: 0.1,
                },
                random: RandomCounts {
                    collocation: 200,
                    ic: 0,
                    bc: 0,
                },
                ic: IcSpec {
                    r: 0.5,
                    m: 5.0,
                    ..IcSpec::default()
                },
                network: NetworkSpec {
                    hidden: vec![16, 16],
                    ..NetworkSpec::default()
                },
                bc_mode: BcMode::Free,
                numeric: NumericConfig {
                    nodes: vec![81],
                    ..Default::default()
                },
                training: crate::training::TrainingConfig {
                    epochs: 500,
                    ..Default::default()
                },
                lattice: LatticeSpec {
                    nx: 41,
                    ny: 2,
                    ..Default::default()
                },
                eval: EvalSpec {
                    random: RandomCounts {
                        collocation: 200,
                        ic: 0,
                        bc: 0,
                    },
                    seed: 17,
                },
                ..pendulum_config(name, "pendulum_a")
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown experiment preset {other:?}; expected one of {EXPERIMENT_PRESETS:?}"
                )))
            }
        };
        Ok(cfg)
    }

    /// Parses a JSON config; syntax and schema errors carry line and column.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "{origin}: config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A validated config with its derived objects.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub system: DynamicalSystem,
    pub ic: SigmoidIc,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let system = DynamicalSystem::preset(&config.system.preset, &config.system.overrides)?;
        config.domain.validate()?;
        let ds = system.dim();
        if config.domain.spatial_dim() != ds {
            return Err(Error::Config(format!(
                "domain has {} spatial dimensions, system {} has {ds}",
                config.domain.spatial_dim(),
                system.name
            )));
        }
        let center = config
            .ic
            .center
            .clone()
            .unwrap_or_else(|| system.equilibrium().to_vec());
        let ic = SigmoidIc {
            a: config.ic.a,
            m: config.ic.m,
            r: config.ic.r,
            c: config.ic.c,
            center,
        };
        ic.validate()?;
        if ic.dim() != ds {
            return Err(Error::Config(format!(
                "IC centre has {} entries, expected {ds}",
                ic.dim()
            )));
        }
        if !config.domain.contains_spatial(system.equilibrium()) {
            return Err(Error::Config(
                "the equilibrium lies outside the spatial domain".into(),
            ));
        }
        if let Some(s) = config.sigma {
            if !(s > 0.0) {
                return Err(Error::Config("sigma must be positive".into()));
            }
        }
        if config.network.hidden.is_empty() || config.network.hidden.contains(&0) {
            return Err(Error::Config(
                "network needs at least one non-empty hidden layer".into(),
            ));
        }
        config.weights.validate()?;
        config.training.validate()?;
        config.trajectory.validate(ds)?;
        if config.numeric.nodes.len() != ds {
            return Err(Error::Config(format!(
                "numeric.nodes has {} entries, expected {ds}",
                config.numeric.nodes.len()
            )));
        }
        let exp = Self { config, system, ic };
        if ds >= 2 {
            exp.lattice()?.validate()?;
        }
        Ok(exp)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::new(ExperimentConfig::preset(name)?)
    }

    pub fn domain(&self) -> &SpatioTemporalDomain {
        &self.config.domain
    }

    pub fn sigma(&self) -> f64 {
        self.config.sigma.unwrap_or_else(|| {
            self.config
                .domain
                .dx
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let d = self.config.domain.dim();
        if self.config.network.hidden == NetworkSpec::default().hidden {
            return default_layer_sizes(d);
        }
        let mut s = vec![d];
        s.extend(&self.config.network.hidden);
        s.push(1);
        s
    }

    pub fn training_sets(&self) -> Result<TrainingSets> {
        let mut sets = generate_training_sets(
            &self.config.domain,
            self.config.random,
            self.sigma(),
            self.config.seed,
        )?;
        self.add_focus(&mut sets, self.config.seed)?;
        Ok(sets)
    }

    pub fn eval_batch(&self) -> Result<Batch> {
        let seed = self.config.eval.seed ^ self.config.seed;
        let mut sets = generate_training_sets(
            &self.config.domain,
            self.config.eval.random,
            self.sigma(),
            seed,
        )?;
        self.add_focus(&mut sets, seed)?;
        Ok(Batch::full(&sets))
    }

    fn add_focus(&self, sets: &mut TrainingSets, seed: u64) -> Result<()> {
        let ic = &self.config.ic;
        let center = ic
            .center
            .clone()
            .unwrap_or_else(|| self.system.equilibrium().to_vec());
        if ic.focus_points > 0 {
            add_focused_ic(
                sets,
                &self.config.domain,
                &center,
                ic.r,
                ic.focus_points,
                seed.wrapping_add(0x1c),
            )?;
        }
        if ic.focus_collocation > 0 {
            add_focused_collocation(
                sets,
                &self.config.domain,
                &center,
                ic.focus_width,
                ic.focus_collocation,
                self.sigma(),
                seed.wrapping_add(0x2c),
            )?;
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<Objective> {
        Objective::new(
            self.system.clone(),
            self.ic.clone(),
            self.config.bc_mode,
            self.config.weights,
            self.config.quadrature_order,
        )
    }

    /// Xavier-initialised network, inputs optionally scaled from the domain
    /// box onto `[-1, 1]`.
    pub fn fresh_model(&self) -> Result<Mlp> {
        let mut m = Mlp::init_xavier(&self.layer_sizes(), self.config.seed)?;
        if self.config.network.scale_inputs {
            let d = &self.config.domain;
            let ranges: Vec<(f64, f64)> = (0..d.dim()).map(|k| d.axis_range(k)).collect();
            m.set_input_box(&ranges)?;
        }
        Ok(m)
    }

    /// Resolved evaluation slice.
    pub fn lattice(&self) -> Result<Lattice> {
        let spec = &self.config.lattice;
        let b = &self.config.domain.bounds;
        let ds = b.len();
        if spec.axes.iter().any(|&a| a >= ds) {
            return Err(Error::Config(format!(
                "lattice axes {:?} out of range",
                spec.axes
            )));
        }
        let base = spec
            .base
            .clone()
            .unwrap_or_else(|| self.system.equilibrium().to_vec());
        if base.len() != ds {
            return Err(Error::Config(format!(
                "lattice base has {} entries, expected {ds}",
                base.len()
            )));
        }
        let l = Lattice {
            axes: spec.axes,
            x: spec.x.unwrap_or(b[spec.axes[0]]),
            y: spec.y.unwrap_or(b[spec.axes[1]]),
            nx: spec.nx,
            ny: spec.ny,
            base,
        };
        l.validate()?;
        Ok(l)
    }

    /// Trains from `init` (a fresh model when `None`).
    pub fn train(
        &self,
        init: Option<Mlp>,
        optimizer: Option<AdamState>,
        start_epoch: usize,
        on_epoch: impl FnMut(&EpochEvent) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let model = match init {
            Some(m) => {
                if m.sizes() != self.layer_sizes().as_slice() {
                    return Err(Error::Shape(format!(
                        "initial model has layer sizes {:?}, config needs {:?}",
                        m.sizes(),
                        self.layer_sizes()
                    )));
                }
                m
            }
            None => self.fresh_model()?,
        };
        let sets = self.training_sets()?;
        let eval = self.eval_batch()?;
        let objective = self.objective()?;
        train(
            &objective,
            &sets,
            &eval,
            &self.config.training,
            model,
            optimizer,
            start_epoch,
            on_epoch,
        )
    }

    pub fn evaluate(&self, model: &Mlp) -> Result<LossReport> {
        self.objective()?.report(model, &self.eval_batch()?)
    }

    pub fn network_estimate(&self, model: &Mlp, t: f64) -> Result<RoaEstimate> {
        if model.input_dim() != self.config.domain.dim() {
            return Err(Error::Dimension {
                expected: self.config.domain.dim(),
                got: model.input_dim(),
            });
        }
        extract_roa(&NetworkField { model, t }, &self.lattice()?, t)
    }

    /// Grid solution at the configured snapshots plus `t_max`.
    pub fn numeric(&self, snapshots: &[f64]) -> Result<(Vec<Snapshot>, SolveStats)> {
        let mut cfg = self.config.numeric.clone();
        cfg.snapshots.extend_from_slice(snapshots);
        solve_numeric(
            &self.system,
            &self.config.domain.bounds,
            &self.ic,
            self.config.bc_mode,
            self.config.domain.t_max,
            &cfg,
        )
    }

    pub fn numeric_estimate(&self, snap: &Snapshot) -> Result<RoaEstimate> {
        extract_roa(&snap.field, &self.lattice()?, snap.time)
    }

    /// Trajectory membership on a square lattice of about `samples` states
    /// (the configured lattice when `samples` is `None`).
    pub fn trajectory_estimate(&self, samples: Option<usize>) -> Result<RoaEstimate> {
        let mut lattice = self.lattice()?;
        if let Some(n) = samples {
            if n == 0 {
                return Err(Error::Config("sample count must be at least 1".into()));
            }
            let side = ((n as f64).sqrt().ceil() as usize).max(2);
            lattice.nx = side;
            lattice.ny = side;
        }
        trajectory_membership(&self.system, &lattice, &self.config.trajectory)
    }
}

impl SpatioTemporalDomain {
    pub fn contains_spatial(&self, x: &[f64]) -> bool {
        x.len() == self.bounds.len()
            && x.iter()
                .zip(&self.bounds)
                .all(|(v, [lo, hi])| lo <= v && v <= hi)
    }
}

/// Files written by [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub loss_csv: PathBuf,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Training with the loss history, periodic checkpoints and the final
/// checkpoint written into `dir`. On failure the files written so far stay.
pub fn train_to_dir(
    exp: &Experiment,
    init: Option<Mlp>,
    optimizer: Option<AdamState>,
    start_epoch: usize,
    dir: &Path,
    mut progress: impl FnMut(usize, &LossReport),
) -> Result<TrainArtifacts> {
    fs::create_dir_all(dir)?;
    let loss_csv = dir.join("loss_history.csv");
    let mut csv = std::io::BufWriter::new(fs::File::create(&loss_csv)?);
    writeln!(csv, "{}", LossReport::CSV_HEADER)?;
    let meta = |epoch: usize| CheckpointMeta {
        layer_sizes: exp.layer_sizes(),
        epoch,
        seed: exp.config.seed,
        system: exp.system.name.clone(),
        extra: serde_json::json!({ "experiment": exp.config.name }),
        optimizer: None,
    };
    let every = exp.config.training.checkpoint_every;
    let mut checkpoints = Vec::new();
    let final_checkpoint = dir.join("final.ckpt");
    let outcome = exp.train(init, optimizer, start_epoch, |ev| {
        if let Some(r) = ev.eval {
            writeln!(csv, "{}", r.csv_row(ev.epoch))?;
            progress(ev.epoch, r);
        }
        if every > 0 && ev.epoch % every == 0 && !ev.is_last {
            csv.flush()?;
            let p = dir.join(format!("epoch_{:06}.ckpt", ev.epoch));
            save_checkpoint(&p, ev.model, &meta(ev.epoch), Some(ev.optimizer))?;
            checkpoints.push(p);
        }
        if ev.is_last {
            save_checkpoint(
                &final_checkpoint,
                ev.model,
                &meta(ev.epoch),
                Some(ev.optimizer),
            )?;
        }
        Ok(())
    });
    csv.flush()?;
    let outcome = outcome?;
    if exp.config.training.epochs == 0 {
        save_checkpoint(
            &final_checkpoint,
            &outcome.model,
            &meta(start_epoch),
            Some(&outcome.optimizer),
        )?;
    }
    Ok(TrainArtifacts {
        outcome,
        loss_csv,
        final_checkpoint,
        checkpoints,
    })
}
