//! Adam, the epoch loop, and full-set evaluation.

use serde::{Deserialize, Serialize};

use crate::domain::{next_minibatch, Batch, MinibatchSchedule, TrainingSets};
use crate::error::{Error, Result};
use crate::losses::{LossReport, Objective};
use crate::network::Mlp;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, cfg: &TrainingConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One bias-corrected Adam update. Leaves everything untouched if any
/// gradient entry is non-finite.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient of length {} for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient entry {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: MinibatchSchedule,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Evaluate the full evaluation set every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: MinibatchSchedule::default(),
            checkpoint_every: 500,
            eval_every: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.schedule.validate()
    }
}

/// One recorded evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub report: LossReport,
}

/// What the per-epoch hook sees.
pub struct EpochEvent<'a> {
    pub epoch: usize,
    /// Present on evaluation epochs.
    pub eval: Option<&'a LossReport>,
    pub model: &'a Mlp,
    pub optimizer: &'a AdamState,
    pub is_last: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub optimizer: AdamState,
    pub history: Vec<EpochRecord>,
    /// Absolute index of the last completed epoch.
    pub last_epoch: usize,
}

/// Full-set losses; never mutates the model.
pub fn evaluate(model: &Mlp, eval: &Batch, objective: &Objective) -> Result<LossReport> {
    objective.report(model, eval)
}

/// Runs epochs `start_epoch + 1 ..= start_epoch + cfg.epochs`.
///
/// Shuffles depend only on the absolute epoch and batch index, so stopping
/// after epoch `k`, saving the model and optimizer, and resuming with
/// `start_epoch = k` repeats the uninterrupted run exactly.
#[allow(clippy::too_many_arguments)]
pub fn train(
    objective: &Objective,
    sets: &TrainingSets,
    eval: &Batch,
    cfg: &TrainingConfig,
    mut model: Mlp,
    optimizer: Option<AdamState>,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut opt = optimizer.unwrap_or_else(|| AdamState::new(model.num_params(), cfg));
    if opt.m.len() != model.num_params() {
        return Err(Error::Shape(
            "optimizer state does not match the model".into(),
        ));
    }
    opt.lr = cfg.learning_rate;
    let mut history = Vec::new();
    let schedule = &cfg.schedule;
    let nb = schedule.batches_per_epoch();
    let end = start_epoch + cfg.epochs;
    for epoch in start_epoch + 1..=end {
        let partition = schedule.collocation_partition(sets.collocation.len(), epoch as u64);
        for b in 0..nb {
            let batch = next_minibatch(sets, schedule, &partition, epoch as u64, b);
            let (_, grad) = objective.gradient(&model, &batch, b)?;
            adam_step(&mut opt, model.params_mut(), &grad)?;
        }
        let is_last = epoch == end;
        let eval_report = if epoch % cfg.eval_every == 0 || is_last {
            let r = evaluate(&model, eval, objective)?;
            if !r.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: "total",
                    batch: 0,
                });
            }
            history.push(EpochRecord { epoch, report: r });
            Some(r)
        } else {
            None
        };
        on_epoch(&EpochEvent {
            epoch,
            eval: eval_report.as_ref(),
            model: &model,
            optimizer: &opt,
            is_last,
        })?;
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        history,
        last_epoch: end,
    })
}

/// First recorded epoch whose total evaluation loss is at or below `target`.
pub fn epochs_to_reach(history: &[EpochRecord], target: f64) -> Option<usize> {
    history
        .iter()
        .find(|r| r.report.total <= target)
        .map(|r| r.epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainingConfig {
        TrainingConfig::default()
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = AdamState::new(3, &cfg());
        let mut p = vec![1.0, -2.0, 3.0];
        adam_step(&mut s, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(3, &cfg());
        let mut p = vec![0.0; 3];
        adam_step(&mut s, &mut p, &[2.0, -0.01, 300.0]).unwrap();
        // m_hat / sqrt(v_hat) = g / |g| up to eps.
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * 0.005).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = AdamState::new(2, &cfg());
        let mut p = vec![1.0, 1.0];
        assert!(adam_step(&mut s, &mut p, &[f64::NAN, 0.0]).is_err());
        assert!(adam_step(&mut s, &mut p, &[0.0]).is_err());
        assert_eq!((p, s.step), (vec![1.0, 1.0], 0));
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut s = AdamState::new(
            2,
            &TrainingConfig {
                learning_rate: 0.05,
                ..cfg()
            },
        );
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 8.0 * (p[1] + 0.5)];
            adam_step(&mut s, &mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn epochs_to_reach_finds_first_crossing() {
        let rec = |epoch, total| EpochRecord {
            epoch,
            report: LossReport {
                total,
                ..Default::default()
            },
        };
        let h = [rec(1, 5.0), rec(2, 3.0), rec(3, 1.0), rec(4, 0.5)];
        assert_eq!(epochs_to_reach(&h, 1.0), Some(3));
        assert_eq!(epochs_to_reach(&h, 0.1), None);
    }
}
