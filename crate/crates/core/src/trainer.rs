//! MAP training of one task: mean minibatch NLL plus the posterior penalty
//! divided by the task's training-set size.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::dataset::{minibatches, Task};
use crate::error::{Error, Result};
use crate::network::{accuracy, backward, forward, nll_loss, LayerGrads, MlpParams};
use crate::numerics::{Matrix, Rng};
use crate::posterior::PosteriorState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Momentum,
    Nesterov,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayUnit {
    Epochs,
    Updates,
}

/// Multiply the learning rate by `factor` every `every` epochs or updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub factor: f64,
    pub every: usize,
    pub unit: DecayUnit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: Option<usize>,
    pub min_epochs: usize,
    /// `k` in the per-task factor `1 / (1 + k t)`.
    pub task_decay: f64,
    pub step_decay: Option<StepDecay>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam()
    }
}

impl OptimizerConfig {
    /// Adam, lr 1e-3, 20 epochs, no early stopping.
    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            epochs: 20,
            batch_size: 100,
            early_stop_patience: None,
            min_epochs: 0,
            task_decay: 0.0,
            step_decay: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// SGD with momentum 0.95, lr 1e-2, early stopping after 5 flat epochs
    /// once 10 have run.
    pub fn momentum() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum,
            learning_rate: 1e-2,
            momentum: 0.95,
            epochs: 50,
            early_stop_patience: Some(5),
            min_epochs: 10,
            ..OptimizerConfig::adam()
        }
    }

    /// Nesterov momentum 0.9, lr 0.1 divided by 10 every 5 epochs, early stopping.
    pub fn nesterov() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Nesterov,
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 50,
            early_stop_patience: Some(5),
            min_epochs: 10,
            step_decay: Some(StepDecay {
                factor: 0.1,
                every: 5,
                unit: DecayUnit::Epochs,
            }),
            ..OptimizerConfig::adam()
        }
    }

    /// Nesterov momentum for the two-task digit split: batch 250, lr 0.1
    /// divided by 10 every 1000 updates.
    pub fn nesterov_disjoint() -> Self {
        OptimizerConfig {
            batch_size: 250,
            epochs: 20,
            early_stop_patience: None,
            min_epochs: 0,
            step_decay: Some(StepDecay {
                factor: 0.1,
                every: 1000,
                unit: DecayUnit::Updates,
            }),
            ..OptimizerConfig::nesterov()
        }
    }

    pub fn for_kind(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam => OptimizerConfig::adam(),
            OptimizerKind::Momentum => OptimizerConfig::momentum(),
            OptimizerKind::Nesterov => OptimizerConfig::nesterov(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::contract("early-stopping patience must be at least 1"));
        }
        if let Some(sd) = &self.step_decay {
            if sd.every == 0 {
                return Err(Error::contract("step decay interval must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Learning rate for task `task` (1-based) at the given epoch (0-based) and
/// update count. Adam runs at a constant rate; the momentum methods apply
/// `1 / (1 + k t)` and the optional step decay.
pub fn lr_schedule(opt: &OptimizerConfig, task: usize, epoch: usize, updates: usize) -> f64 {
    if opt.kind == OptimizerKind::Adam {
        return opt.learning_rate;
    }
    let mut lr = opt.learning_rate / (1.0 + opt.task_decay * task as f64);
    if let Some(sd) = &opt.step_decay {
        let counter = match sd.unit {
            DecayUnit::Epochs => epoch,
            DecayUnit::Updates => updates,
        };
        lr *= sd.factor.powi((counter / sd.every) as i32);
    }
    lr
}

/// Optimizer moments; `steps` counts updates taken.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &MlpParams) -> Self {
        let zeros = || params.layers.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        OptimizerState {
            kind,
            first: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            steps: 0,
        }
    }
}

/// One parameter update in place.
pub fn optimizer_step(opt: &OptimizerConfig, state: &mut OptimizerState, params: &mut MlpParams, grads: &LayerGrads, lr: f64) {
    state.steps += 1;
    match state.kind {
        OptimizerKind::Adam => {
            let t = state.steps as i32;
            let c1 = 1.0 - opt.beta1.powi(t);
            let c2 = 1.0 - opt.beta2.powi(t);
            for (((w, g), m), v) in params
                .layers
                .iter_mut()
                .zip(grads)
                .zip(&mut state.first)
                .zip(&mut state.second)
            {
                let w = w.as_mut_slice();
                let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
                for (k, &gk) in g.as_slice().iter().enumerate() {
                    m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
                    v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
                    let mhat = m[k] / c1;
                    let vhat = v[k] / c2;
                    w[k] -= lr * mhat / (vhat.sqrt() + opt.epsilon);
                }
            }
        }
        OptimizerKind::Momentum | OptimizerKind::Nesterov => {
            let mu = opt.momentum;
            let nesterov = state.kind == OptimizerKind::Nesterov;
            for ((w, g), vel) in params.layers.iter_mut().zip(grads).zip(&mut state.first) {
                let w = w.as_mut_slice();
                let vel = vel.as_mut_slice();
                for (k, &gk) in g.as_slice().iter().enumerate() {
                    vel[k] = mu * vel[k] - lr * gk;
                    w[k] += if nesterov { mu * vel[k] - lr * gk } else { vel[k] };
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    /// 0-based index of the best (first maximal) entry.
    pub best: usize,
}

/// Stops once `patience` epochs have passed without strict improvement and
/// at least `min_epochs` have run.
pub fn early_stop(history: &[f64], patience: usize, min_epochs: usize) -> EarlyStop {
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    let stagnant = history.len().saturating_sub(best + 1);
    EarlyStop {
        stop: !history.is_empty() && history.len() >= min_epochs && stagnant >= patience,
        best,
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: MlpParams,
    /// Mean minibatch objective per epoch.
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// 0-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

/// Minimizes `mean NLL(batch) + penalty(θ) / N_train` over minibatches.
///
/// With early stopping the parameters of the best validation epoch are
/// returned, otherwise those of the last epoch.
pub fn train_task(
    params_init: &MlpParams,
    posterior: &PosteriorState,
    task: &Task,
    opt: &OptimizerConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    opt.validate()?;
    params_init.validate()?;
    if task.train.is_empty() {
        return Err(Error::contract("task has no training data"));
    }
    if opt.early_stop_patience.is_some() && task.val.is_empty() {
        return Err(Error::contract("early stopping needs a validation set"));
    }
    let n = task.train.len();
    let inv_n = 1.0 / n as f64;
    let lambda = posterior.terms.last().map_or(0.0, |t| t.weight);
    let mut params = params_init.clone();
    let mut state = OptimizerState::new(opt.kind, &params);
    let mut report = TrainReport {
        params: params.clone(),
        train_loss: Vec::new(),
        val_accuracy: Vec::new(),
        epochs_run: 0,
        stopped_early: false,
        best_epoch: 0,
    };
    let mut best_params = params.clone();
    let mut updates = 0usize;

    for epoch in 0..opt.epochs {
        let batches = minibatches(n, opt.batch_size, rng)?;
        let mut epoch_loss = 0.0;
        let lr_epoch = lr_schedule(opt, task.id, epoch, updates);
        for batch in &batches {
            let x = task.train.gather(batch);
            let y = task.train.gather_labels(batch);
            let cache = forward(&params, &x)?;
            let nll = nll_loss(cache.logits(), &y)?;
            let mut grads = backward(&params, &cache, &y)?.grads;
            let (pen, pen_grad) = posterior.penalty_and_grad(&params.layers)?;
            let objective = nll + pen * inv_n;
            let lr = lr_schedule(opt, task.id, epoch, updates);
            if !objective.is_finite() {
                return Err(Error::Divergence {
                    task: task.id,
                    epoch: epoch + 1,
                    loss: objective,
                    lambda,
                    lr,
                });
            }
            for (g, pg) in grads.iter_mut().zip(&pen_grad) {
                g.axpy(inv_n, pg);
            }
            optimizer_step(opt, &mut state, &mut params, &grads, lr);
            updates += 1;
            epoch_loss += objective * batch.len() as f64;
        }
        epoch_loss *= inv_n;
        report.train_loss.push(epoch_loss);
        report.epochs_run = epoch + 1;
        if !params.layers.iter().all(Matrix::is_finite) {
            return Err(Error::Divergence {
                task: task.id,
                epoch: epoch + 1,
                loss: f64::NAN,
                lambda,
                lr: lr_epoch,
            });
        }
        if !task.val.is_empty() {
            report.val_accuracy.push(accuracy(&params, &task.val)?);
        }
        debug!(
            "task {} epoch {} loss {:.5} val {:?}",
            task.id,
            epoch + 1,
            epoch_loss,
            report.val_accuracy.last()
        );
        if let Some(patience) = opt.early_stop_patience {
            let es = early_stop(&report.val_accuracy, patience, opt.min_epochs);
            if es.best == epoch {
                best_params = params.clone();
            }
            report.best_epoch = es.best;
            if es.stop {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.params = if opt.early_stop_patience.is_some() {
        best_params
    } else {
        report.best_epoch = report.epochs_run - 1;
        params
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl_params(x: &[f64]) -> MlpParams {
        MlpParams {
            layers: vec![Matrix::from_vec(1, x.len(), x.to_vec()).unwrap()],
            activations: vec![],
        }
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let opt = OptimizerConfig::adam();
        let mut p = bowl_params(&[0.0, 0.0, 0.0]);
        let mut st = OptimizerState::new(OptimizerKind::Adam, &p);
        let g = vec![Matrix::from_vec(1, 3, vec![3.0, -0.5, 1e-3]).unwrap()];
        optimizer_step(&opt, &mut st, &mut p, &g, 0.01);
        for (w, s) in p.layers[0].as_slice().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - s * 0.01).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn zero_momentum_is_sgd() {
        let mut opt = OptimizerConfig::momentum();
        opt.momentum = 0.0;
        let mut p = bowl_params(&[1.0, 2.0]);
        let mut st = OptimizerState::new(OptimizerKind::Momentum, &p);
        let g = vec![Matrix::from_vec(1, 2, vec![0.5, -1.0]).unwrap()];
        optimizer_step(&opt, &mut st, &mut p, &g, 0.1);
        optimizer_step(&opt, &mut st, &mut p, &g, 0.1);
        assert!((p.layers[0][(0, 0)] - 0.9).abs() < 1e-15);
        assert!((p.layers[0][(0, 1)] - 2.2).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges_for_all_kinds() {
        // f(x) = ½ Σ c_i (x_i − 1)², minimum at 1.
        let curv = [1.0, 4.0, 0.5];
        for opt in [OptimizerConfig::adam(), OptimizerConfig::momentum(), OptimizerConfig::nesterov()] {
            let mut p = bowl_params(&[5.0, -3.0, 0.0]);
            let mut st = OptimizerState::new(opt.kind, &p);
            let lr = if opt.kind == OptimizerKind::Adam { 0.01 } else { 0.05 };
            let mut steps = 0;
            while steps < 10_000 {
                let x = p.layers[0].as_slice().to_vec();
                if x.iter().all(|v| (v - 1.0).abs() < 1e-6) {
                    break;
                }
                let g: Vec<f64> = x.iter().zip(&curv).map(|(v, c)| c * (v - 1.0)).collect();
                let g = vec![Matrix::from_vec(1, 3, g).unwrap()];
                optimizer_step(&opt, &mut st, &mut p, &g, lr);
                steps += 1;
            }
            let err = p.layers[0].as_slice().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{:?} ended at error {err} after {steps} steps", opt.kind);
        }
    }

    #[test]
    fn schedules() {
        let mut adam = OptimizerConfig::adam();
        adam.task_decay = 5.0;
        assert_eq!(lr_schedule(&adam, 3, 9, 5000), 1e-3);

        let mut mom = OptimizerConfig::momentum();
        mom.task_decay = 0.0;
        assert_eq!(lr_schedule(&mom, 4, 0, 0), 1e-2);
        mom.task_decay = 0.5;
        assert!((lr_schedule(&mom, 2, 0, 0) - 1e-2 / 2.0).abs() < 1e-18);

        let nes = OptimizerConfig::nesterov();
        assert_eq!(lr_schedule(&nes, 1, 4, 0), 0.1);
        assert!((lr_schedule(&nes, 1, 5, 0) - 0.01).abs() < 1e-15);

        let dis = OptimizerConfig::nesterov_disjoint();
        assert_eq!(lr_schedule(&dis, 1, 0, 999), 0.1);
        assert!((lr_schedule(&dis, 1, 0, 1000) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(&dis, 1, 0, 2000) - 0.001).abs() < 1e-16);
    }

    #[test]
    fn early_stopping_rules() {
        let rising: Vec<f64> = (0..30).map(|i| i as f64).collect();
        for len in 1..=30 {
            assert!(!early_stop(&rising[..len], 5, 10).stop);
        }

        let flat = vec![0.5; 15];
        let first_stop = (1..=15).find(|&len| early_stop(&flat[..len], 5, 10).stop);
        assert_eq!(first_stop, Some(10));

        let mut hist = vec![0.1, 0.2, 0.3, 0.4, 0.9];
        hist.extend([0.5; 10]);
        let first_stop = (1..=15).find(|&len| early_stop(&hist[..len], 5, 10).stop);
        assert_eq!(first_stop, Some(10));
        assert_eq!(early_stop(&hist, 5, 10).best, 4);
        assert_eq!(early_stop(&[0.3, 0.7, 0.7, 0.2], 10, 0).best, 1);
    }

    #[test]
    fn invalid_configs() {
        let mut o = OptimizerConfig::adam();
        o.learning_rate = 0.0;
        assert!(o.validate().is_err());
        let mut o = OptimizerConfig::adam();
        o.epochs = 0;
        assert!(o.validate().is_err());
    }
}
