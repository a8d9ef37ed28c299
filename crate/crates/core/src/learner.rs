//! A single task-aware base learner and its optimizer.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackSpec};
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::numeric::{Norm, ParameterVector, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps_hat: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    fn slot_count(&self) -> usize {
        match self {
            OptimizerKind::SgdMomentum { .. } => 1,
            OptimizerKind::Adam { .. } => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("momentum {momentum} outside [0, 1)")))
            }
            OptimizerKind::Adam { beta1, beta2, eps_hat }
                if !(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0 && eps_hat >= 0.0) =>
            {
                Err(Error::Config(format!(
                    "adam betas ({beta1}, {beta2}) must lie in (0, 1)"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer hyperparameters plus per-parameter slots: the velocity for
/// SGD, or first and second moments for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub weight_decay: f64,
    pub slots: Vec<ParameterVector>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr0: f64, weight_decay: f64, like: &ParameterVector) -> Result<Self> {
        kind.validate()?;
        if !(lr0 >= 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {lr0} and weight decay {weight_decay} must be >= 0"
            )));
        }
        Ok(Self {
            kind,
            lr0,
            weight_decay,
            slots: vec![ParameterVector::zeros(like.len(), like.layout()); kind.slot_count()],
            step: 0,
        })
    }

    pub fn reset(&mut self) {
        for s in &mut self.slots {
            s.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        self.step = 0;
    }

    fn check(&self, params: &ParameterVector, grad: &ParameterVector) -> Result<()> {
        params.check_compatible(grad)?;
        for s in &self.slots {
            params.check_compatible(s)?;
        }
        Ok(())
    }

    /// `v <- momentum v + (g + wd theta)`, `theta <- theta - lr v`.
    pub fn sgd_step(&mut self, params: &mut ParameterVector, grad: &ParameterVector, lr: f64) -> Result<()> {
        let OptimizerKind::SgdMomentum { momentum } = self.kind else {
            return Err(Error::Config("sgd_step on a non-SGD optimizer".into()));
        };
        self.check(params, grad)?;
        let wd = self.weight_decay;
        let v = self.slots[0].as_mut_slice();
        for ((p, g), vi) in params.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(v) {
            *vi = momentum * *vi + (g + wd * *p);
            *p -= lr * *vi;
        }
        self.step += 1;
        Ok(())
    }

    /// Bias-corrected Adam with coupled (L2) weight decay.
    pub fn adam_step(&mut self, params: &mut ParameterVector, grad: &ParameterVector, lr: f64) -> Result<()> {
        let OptimizerKind::Adam { beta1, beta2, eps_hat } = self.kind else {
            return Err(Error::Config("adam_step on a non-Adam optimizer".into()));
        };
        self.check(params, grad)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let wd = self.weight_decay;
        let (m_slot, v_slot) = self.slots.split_at_mut(1);
        let m = m_slot[0].as_mut_slice();
        let v = v_slot[0].as_mut_slice();
        for (((p, g), mi), vi) in params.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
            let g = g + wd * *p;
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps_hat);
        }
        Ok(())
    }

    pub fn apply(&mut self, params: &mut ParameterVector, grad: &ParameterVector, lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::SgdMomentum { .. } => self.sgd_step(params, grad, lr),
            OptimizerKind::Adam { .. } => self.adam_step(params, grad, lr),
        }
    }
}

/// Constant learning rate until `constant_until`, then a linear ramp down
/// to `terminal_fraction * lr0` at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub constant_until: usize,
    pub total_epochs: usize,
    pub terminal_fraction: f64,
}

impl ScheduleSpec {
    pub fn constant(total_epochs: usize) -> Self {
        Self {
            constant_until: total_epochs,
            total_epochs,
            terminal_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.constant_until > self.total_epochs {
            return Err(Error::Config(format!(
                "schedule holds until epoch {} past the total of {}",
                self.constant_until, self.total_epochs
            )));
        }
        if !(self.terminal_fraction >= 0.0) {
            return Err(Error::Config("terminal learning-rate fraction must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &ScheduleSpec, lr0: f64, epoch: usize) -> Result<f64> {
    if epoch > schedule.total_epochs {
        return Err(Error::Domain(format!(
            "epoch {epoch} beyond schedule length {}",
            schedule.total_epochs
        )));
    }
    if epoch <= schedule.constant_until {
        return Ok(lr0);
    }
    let span = (schedule.total_epochs - schedule.constant_until) as f64;
    let frac = (epoch - schedule.constant_until) as f64 / span;
    Ok(lr0 * (1.0 - frac * (1.0 - schedule.terminal_fraction)))
}

/// `buffer <- decay buffer + (1 - decay) current`.
pub fn wa_update(buffer: &mut ParameterVector, current: &ParameterVector, decay: f64) -> Result<()> {
    buffer.check_compatible(current)?;
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Domain(format!("averaging decay {decay} outside [0, 1]")));
    }
    for (b, c) in buffer.as_mut_slice().iter_mut().zip(current.as_slice()) {
        *b = decay * *b + (1.0 - decay) * c;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Natural,
    AdvLinf,
    AdvL2,
}

impl Task {
    pub fn norm(self) -> Option<Norm> {
        match self {
            Task::Natural => None,
            Task::AdvLinf => Some(Norm::Linf),
            Task::AdvL2 => Some(Norm::L2),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Natural => "natural",
            Task::AdvLinf => "adv_linf",
            Task::AdvL2 => "adv_l2",
        })
    }
}

/// Per-learner weight averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAverage {
    pub buffer: ParameterVector,
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLearner {
    pub task: Task,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub attack: Option<AttackSpec>,
    pub wa: Option<WeightAverage>,
    pub schedule: ScheduleSpec,
    /// Random-start stream for this learner's attacks.
    pub rng: RngStream,
}

impl BaseLearner {
    pub fn new(
        task: Task,
        model: Model,
        optimizer: OptimizerState,
        attack: Option<AttackSpec>,
        wa_decay: Option<f64>,
        schedule: ScheduleSpec,
        rng: RngStream,
    ) -> Result<Self> {
        match (task.norm(), &attack) {
            (None, None) => {}
            (Some(n), Some(a)) if a.norm == n => a.validate()?,
            _ => {
                return Err(Error::Config(format!(
                    "task {task} is incompatible with attack {attack:?}"
                )))
            }
        }
        schedule.validate()?;
        for s in &optimizer.slots {
            model.params().check_compatible(s)?;
        }
        let wa = match wa_decay {
            Some(decay) if (0.0..=1.0).contains(&decay) => Some(WeightAverage {
                buffer: model.params().clone(),
                decay,
            }),
            Some(decay) => return Err(Error::Config(format!("WA decay {decay} outside [0, 1]"))),
            None => None,
        };
        Ok(Self {
            task,
            model,
            optimizer,
            attack,
            wa,
            schedule,
            rng,
        })
    }

    /// Parameters the learner exposes for aggregation.
    pub fn params(&self, use_wa: bool) -> &ParameterVector {
        match (&self.wa, use_wa) {
            (Some(wa), true) => &wa.buffer,
            _ => self.model.params(),
        }
    }

    /// The batch this learner trains on: adversarial for attack tasks.
    pub fn task_batch(&mut self, batch: &Batch) -> Result<Batch> {
        match &self.attack {
            Some(spec) => {
                let adv = pgd_attack(&self.model, batch, spec, &mut self.rng)?;
                Ok(batch.with_inputs(adv))
            }
            None => Ok(batch.clone()),
        }
    }

    /// One optimizer step on one minibatch; returns the training loss.
    pub fn train_batch(&mut self, batch: &Batch, epoch: usize) -> Result<f64> {
        let train = self.task_batch(batch)?;
        let grads = self.model.backward(&train)?;
        let lr = lr_at(&self.schedule, self.optimizer.lr0, epoch)?;
        self.optimizer.apply(self.model.params_mut(), &grads.params, lr)?;
        self.model.params().ensure_finite()?;
        if let Some(wa) = &mut self.wa {
            wa_update(&mut wa.buffer, self.model.params(), wa.decay)?;
        }
        Ok(grads.loss)
    }

    /// Overwrites the parameters, optionally clearing optimizer slots and
    /// restarting weight averaging from the new point.
    pub fn reset_to(&mut self, params: &ParameterVector, reset_state: bool) -> Result<()> {
        self.model.set_params(params.clone())?;
        if reset_state {
            self.optimizer.reset();
            if let Some(wa) = &mut self.wa {
                wa.buffer = params.clone();
            }
        }
        Ok(())
    }
}

/// Runs one epoch over `data`, one optimizer step per minibatch.
pub fn learner_epoch(learner: &mut BaseLearner, data: &[Batch], epoch: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Domain("learner epoch over no minibatches".into()));
    }
    for batch in data {
        learner.train_batch(batch, epoch)?;
    }
    Ok(())
}
