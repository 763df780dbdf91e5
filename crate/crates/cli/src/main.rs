//! `safety-net` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use safety_net::checkpoint::load_checkpoint;
use safety_net::experiment::{train_to_dir, Experiment, ExperimentConfig, EXPERIMENT_PRESETS};
use safety_net::roa::{compare, RoaEstimate};
use safety_net::Error;

const THREADS_ENV: &str = "SAFETY_NET_THREADS";
const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "safety-net",
    version,
    about = "Region-of-attraction estimation with physics-informed networks"
)]
struct Cli {
    /// Directory that receives one sub-directory per run.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Single worker thread; outputs are bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Train a network; writes the loss history and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the evaluation lattice.
    Eval(EvalArgs),
    /// Grid solution of the level-set equation (at most 3 state variables).
    Numeric(NumericArgs),
    /// Trajectory-classification membership field.
    McOracle(McArgs),
    /// Agreement between two estimates.
    Compare(CompareArgs),
    /// List shipped presets, or write them as config files.
    Presets(PresetArgs),
    /// Repeat the run recorded in a manifest.
    #[serde(skip)]
    Rerun { manifest: PathBuf },
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ConfigArg {
    /// Config file, or `preset:NAME` for a shipped experiment.
    config: String,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Initialise the parameters from this checkpoint.
    #[arg(long, conflicts_with = "resume")]
    warm_start: Option<PathBuf>,
    /// Continue a run: parameters, optimizer state and epoch counter.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Lattice nodes per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Fixed state variables, e.g. `x1=0,x2=0`; the two others are plotted.
    #[arg(long)]
    slice: Option<String>,
    /// Extra times besides 0 and t_max.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct NumericArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_delimiter = ',')]
    snapshots: Vec<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct McArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of classified states (rounded up to a square lattice).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    /// Lattice cells excluded around either boundary.
    #[arg(long, default_value_t = 2)]
    band: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct PresetArgs {
    /// Write every preset as `<name>.json` into this directory.
    #[arg(long)]
    write: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    command: Command,
    deterministic: bool,
    threads: usize,
    /// Resolved config (absent for `compare`).
    config: Option<ExperimentConfig>,
    /// SHA-256 of the command, the resolved config and every input file.
    content_hash: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

type CliResult<T> = Result<T, Error>;

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn load_config(arg: &ConfigArg) -> CliResult<ExperimentConfig> {
    match arg.config.strip_prefix("preset:") {
        Some(name) => ExperimentConfig::preset(name),
        None => ExperimentConfig::load(Path::new(&arg.config)),
    }
}

/// Where a run writes, and what went into it.
struct Run {
    dir: PathBuf,
    hash: String,
    inputs: Vec<FileDigest>,
}

impl Run {
    fn prepare(
        out: &Path,
        command: &Command,
        config: Option<&ExperimentConfig>,
        inputs: &[&Path],
    ) -> CliResult<Self> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(command)?);
        if let Some(c) = config {
            h.update(serde_json::to_vec(c)?);
        }
        let mut digests = Vec::new();
        for p in inputs {
            let d = sha256_file(p)?;
            h.update(d.as_bytes());
            digests.push(FileDigest {
                path: p.display().to_string(),
                sha256: d,
            });
        }
        let hash = hex::encode(h.finalize());
        let label = match config {
            Some(c) => format!("{}-{}", command_name(command), c.name),
            None => command_name(command).to_string(),
        };
        let dir = out.join(format!("{label}-{}", &hash[..12]));
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            hash,
            inputs: digests,
        })
    }

    fn finish(
        self,
        command: Command,
        config: Option<ExperimentConfig>,
        deterministic: bool,
    ) -> CliResult<PathBuf> {
        let mut outputs = Vec::new();
        let mut names: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST))
            .collect();
        names.sort();
        for p in names {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            outputs.push(FileDigest {
                path: name,
                sha256: sha256_file(&p)?,
            });
        }
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            deterministic,
            threads: rayon::current_num_threads(),
            config,
            content_hash: self.hash,
            inputs: self.inputs,
            outputs,
        };
        fs::write(
            self.dir.join(MANIFEST),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(self.dir)
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Numeric(_) => "numeric",
        Command::McOracle(_) => "mc-oracle",
        Command::Compare(_) => "compare",
        Command::Presets(_) => "presets",
        Command::Rerun { .. } => "rerun",
    }
}

fn time_tag(t: f64) -> String {
    format!("t{t}").replace('.', "p").replace('-', "m")
}

/// One state variable: `x,u` rows instead of a planar estimate.
fn write_profile(path: &Path, xs: &[f64], us: &[f64]) -> CliResult<()> {
    let mut text = String::from("x,u\n");
    for (x, u) in xs.iter().zip(us) {
        text.push_str(&format!("{x},{u}\n"));
    }
    Ok(fs::write(path, text)?)
}

fn profile_nodes(exp: &Experiment) -> Vec<f64> {
    let [lo, hi] = exp.config.domain.bounds[0];
    let n = exp.config.lattice.nx.max(2);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn write_estimate(dir: &Path, stem: &str, est: &RoaEstimate) -> CliResult<()> {
    est.write_json(&dir.join(format!("{stem}.json")))?;
    est.write_csv(&dir.join(format!("{stem}.csv")))
}

/// `x1=0,x2=0` fixes state variables 1 and 2 (1-based); the remaining two
/// become the plotted axes.
fn apply_slice(cfg: &mut ExperimentConfig, spec: &str, equilibrium: &[f64]) -> CliResult<()> {
    let d = equilibrium.len();
    let mut base = cfg
        .lattice
        .base
        .clone()
        .unwrap_or_else(|| equilibrium.to_vec());
    let mut fixed = vec![false; d];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::Config(format!("slice entry {part:?} must look like x3=0.5"));
        let (name, value) = part.split_once('=').ok_or_else(bad)?;
        let k: usize = name
            .trim()
            .strip_prefix('x')
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?;
        if k == 0 || k > d {
            return Err(Error::Config(format!(
                "slice variable x{k} out of range 1..={d}"
            )));
        }
        base[k - 1] = value.trim().parse().map_err(|_| bad())?;
        fixed[k - 1] = true;
    }
    let free: Vec<usize> = (0..d).filter(|k| !fixed[*k]).collect();
    if free.len() != 2 {
        return Err(Error::Config(format!(
            "slice must leave exactly two free variables, {} remain",
            free.len()
        )));
    }
    cfg.lattice.axes = [free[0], free[1]];
    cfg.lattice.x = None;
    cfg.lattice.y = None;
    cfg.lattice.base = Some(base);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let out = cli.out.clone();
    let det = cli.deterministic;
    match cli.command.clone() {
        Command::Presets(args) => {
            for name in EXPERIMENT_PRESETS {
                let cfg = ExperimentConfig::preset(name)?;
                match &args.write {
                    Some(dir) => {
                        fs::create_dir_all(dir)?;
                        fs::write(dir.join(format!("{name}.json")), cfg.to_json()?)?;
                    }
                    None => println!("{name}"),
                }
            }
            Ok(())
        }
        Command::Rerun { manifest } => {
            let m: Manifest = serde_json::from_slice(&fs::read(&manifest)?)
                .map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
            let command = m.command;
            let config = m.config;
            dispatch(&out, det || m.deterministic, command, config)
        }
        command => dispatch(&out, det, command, None),
    }
}

/// Runs one command. `config` overrides the command's config argument
/// (used when repeating a run from its manifest).
fn dispatch(
    out: &Path,
    det: bool,
    command: Command,
    config: Option<ExperimentConfig>,
) -> CliResult<()> {
    let resolve = |arg: &ConfigArg| -> CliResult<ExperimentConfig> {
        match &config {
            Some(c) => Ok(c.clone()),
            None => load_config(arg),
        }
    };
    match &command {
        Command::Train(a) => {
            let mut cfg = resolve(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.training.epochs = e;
            }
            let exp = Experiment::new(cfg.clone())?;
            let sizes = exp.layer_sizes();
            let (init, optimizer, start) = match (&a.warm_start, &a.resume) {
                (Some(p), _) => {
                    // Parameters only; input scaling follows the new domain.
                    let ck = load_checkpoint(p, Some(&sizes))?;
                    let mut m = exp.fresh_model()?;
                    m.params_mut().copy_from_slice(ck.model.params());
                    (Some(m), None, 0)
                }
                (None, Some(p)) => {
                    let ck = load_checkpoint(p, Some(&sizes))?;
                    (Some(ck.model), ck.optimizer, ck.meta.epoch)
                }
                (None, None) => (None, None, 0),
            };
            let inputs: Vec<&Path> = a
                .warm_start
                .iter()
                .chain(&a.resume)
                .map(PathBuf::as_path)
                .collect();
            let run = Run::prepare(out, &command, Some(&cfg), &inputs)?;
            fs::write(run.dir.join("config.json"), cfg.to_json()?)?;
            println!("run directory: {}", run.dir.display());
            let art = train_to_dir(&exp, init, optimizer, start, &run.dir, |epoch, r| {
                println!(
                    "epoch {epoch:>6}  total {:.6e}  ic {:.3e}  bc {:.3e}  mon {:.3e}  r {:.3e}  v {:.3e}",
                    r.total, r.l_ic, r.l_bc, r.l_mon, r.l_r, r.l_v
                );
            })?;
            println!("final checkpoint: {}", art.final_checkpoint.display());
            run.finish(command, Some(cfg), det)?;
        }
        Command::Eval(a) => {
            let mut cfg = resolve(&a.config)?;
            if config.is_none() {
                if let Some(n) = a.grid {
                    cfg.lattice.nx = n;
                    cfg.lattice.ny = n;
                }
                if let Some(spec) = &a.slice {
                    let eq = Experiment::new(cfg.clone())?.system.equilibrium().to_vec();
                    apply_slice(&mut cfg, spec, &eq)?;
                }
            }
            let exp = Experiment::new(cfg.clone())?;
            let ck = load_checkpoint(&a.checkpoint, None)?;
            if ck.model.input_dim() != exp.config.domain.dim() {
                return Err(Error::Dimension {
                    expected: exp.config.domain.dim(),
                    got: ck.model.input_dim(),
                });
            }
            let planar = exp.system.dim() >= 2;
            if planar {
                exp.lattice()?;
            }
            let mut times = vec![0.0, cfg.domain.t_max];
            times.extend(&a.times);
            if let Some(t) = times
                .iter()
                .find(|t| !(0.0..=cfg.domain.t_max).contains(*t))
            {
                return Err(Error::Config(format!(
                    "time {t} outside [0, {}]",
                    cfg.domain.t_max
                )));
            }
            times.sort_by(f64::total_cmp);
            times.dedup();
            let run = Run::prepare(out, &command, Some(&cfg), &[&a.checkpoint])?;
            for t in times {
                if planar {
                    let est = exp.network_estimate(&ck.model, t)?;
                    write_estimate(&run.dir, &format!("roa_{}", time_tag(t)), &est)?;
                    println!(
                        "t = {t}: {} member nodes, {} contours",
                        est.member_count(),
                        est.contours.len()
                    );
                } else {
                    let xs = profile_nodes(&exp);
                    let us = xs
                        .iter()
                        .map(|&x| ck.model.forward(&[x, t]))
                        .collect::<Result<Vec<_>, _>>()?;
                    write_profile(
                        &run.dir.join(format!("profile_{}.csv", time_tag(t))),
                        &xs,
                        &us,
                    )?;
                }
            }
            let report = exp.evaluate(&ck.model)?;
            fs::write(
                run.dir.join("eval_loss.json"),
                serde_json::to_vec_pretty(&report)?,
            )?;
            let dir = run.finish(command, Some(cfg), det)?;
            println!("outputs: {}", dir.display());
        }
        Command::Numeric(a) => {
            let cfg = resolve(&a.config)?;
            let exp = Experiment::new(cfg.clone())?;
            if exp.system.dim() > 3 {
                return Err(Error::Config(format!(
                    "system has {} state variables; the grid solver handles at most 3, use `mc-oracle`",
                    exp.system.dim()
                )));
            }
            let run = Run::prepare(out, &command, Some(&cfg), &[])?;
            let mut times = vec![0.0];
            times.extend(&a.snapshots);
            let (snaps, stats) = exp.numeric(&times)?;
            for s in &snaps {
                if exp.system.dim() >= 2 {
                    let est = exp.numeric_estimate(s)?;
                    write_estimate(&run.dir, &format!("numeric_{}", time_tag(s.time)), &est)?;
                    println!(
                        "t = {}: {} member nodes, {} contours",
                        s.time,
                        est.member_count(),
                        est.contours.len()
                    );
                } else {
                    let xs: Vec<f64> = (0..s.field.shape[0]).map(|i| s.field.coord(0, i)).collect();
                    write_profile(
                        &run.dir.join(format!("numeric_{}.csv", time_tag(s.time))),
                        &xs,
                        &s.field.values,
                    )?;
                }
            }
            fs::write(
                run.dir.join("numeric_stats.json"),
                serde_json::to_vec_pretty(&stats)?,
            )?;
            let dir = run.finish(command, Some(cfg), det)?;
            println!("outputs: {}", dir.display());
        }
        Command::McOracle(a) => {
            let cfg = resolve(&a.config)?;
            let exp = Experiment::new(cfg.clone())?;
            if exp.system.dim() < 2 {
                return Err(Error::Config(
                    "mc-oracle needs at least two state variables".into(),
                ));
            }
            exp.lattice()?;
            let run = Run::prepare(out, &command, Some(&cfg), &[])?;
            let est = exp.trajectory_estimate(a.samples)?;
            write_estimate(&run.dir, "mc_membership", &est)?;
            println!(
                "{} of {} states converge",
                est.member_count(),
                est.values.len()
            );
            let dir = run.finish(command, Some(cfg), det)?;
            println!("outputs: {}", dir.display());
        }
        Command::Compare(a) => {
            let ea = RoaEstimate::read_json(&a.a)?;
            let eb = RoaEstimate::read_json(&a.b)?;
            let report = compare(&ea, &eb, a.band)?;
            let run = Run::prepare(out, &command, None, &[&a.a, &a.b])?;
            fs::write(
                run.dir.join("compare.json"),
                serde_json::to_vec_pretty(&report)?,
            )?;
            println!(
                "agreement {:.4} over {} nodes ({} excluded), symmetric difference {:.4}",
                report.agreement, report.compared, report.excluded, report.symmetric_difference
            );
            run.finish(command, None, det)?;
        }
        Command::Presets(_) | Command::Rerun { .. } => unreachable!("handled by run"),
    }
    Ok(())
}

fn configure_threads(deterministic: bool) -> CliResult<()> {
    let threads = if deterministic {
        1
    } else {
        match std::env::var(THREADS_ENV) {
            Ok(v) => v.parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| {
                Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))
            })?,
            Err(_) => 0,
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.deterministic) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
