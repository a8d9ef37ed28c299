//! The aggregation framework: base learners train on their own tasks, a
//! global learner tracks an exponential moving average of their convex
//! mixture, and on a fixed schedule the global parameters are copied back
//! into every learner.
//!
//! Granularity: the moving average runs once per minibatch, the
//! redistribution gate is evaluated once per completed epoch.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackSpec};
use crate::error::{Error, Result};
use crate::learner::{lr_at, BaseLearner, OptimizerState, ScheduleSpec};
use crate::model::{Batch, Model};
use crate::numeric::{convex_combine, ParameterVector, RngStream, WEIGHT_SUM_TOL};

/// Piecewise-linear schedule over training progress in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub breakpoints: Vec<(f64, f64)>,
}

impl Default for GammaSchedule {
    /// Hold 1.0 for three quarters of training, then decay linearly to 0.
    fn default() -> Self {
        Self {
            breakpoints: vec![(0.0, 1.0), (0.75, 1.0), (1.0, 0.0)],
        }
    }
}

impl GammaSchedule {
    pub fn constant(value: f64) -> Self {
        Self {
            breakpoints: vec![(0.0, value), (1.0, value)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bp = &self.breakpoints;
        if bp.len() < 2 || bp[0].0 != 0.0 || bp[bp.len() - 1].0 != 1.0 {
            return Err(Error::Config(
                "gamma breakpoints must start at progress 0 and end at progress 1".into(),
            ));
        }
        if bp.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::Config("gamma breakpoints must be strictly increasing".into()));
        }
        if bp.iter().any(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("gamma values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn gamma_at(schedule: &GammaSchedule, progress: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Domain(format!("progress {progress} outside [0, 1]")));
    }
    schedule.validate()?;
    let bp = &schedule.breakpoints;
    for w in bp.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if progress <= x1 {
            if progress == x1 {
                return Ok(y1);
            }
            return Ok(y0 + (y1 - y0) * (progress - x0) / (x1 - x0));
        }
    }
    Ok(bp[bp.len() - 1].1)
}

/// Redistribution gate: epochs are counted from 1 as they complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncSchedule {
    pub t_prime: usize,
    pub c: usize,
    pub total_epochs: usize,
}

impl SyncSchedule {
    /// `t' = 62.5%` of training, `c = 5`.
    pub fn scaled_default(total_epochs: usize) -> Self {
        Self {
            t_prime: (total_epochs as f64 * 0.625).round() as usize,
            c: 5,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(Error::Config("communication period c must be >= 1".into()));
        }
        if self.t_prime > self.total_epochs {
            return Err(Error::Config(format!(
                "t' = {} exceeds the {} training epochs",
                self.t_prime, self.total_epochs
            )));
        }
        Ok(())
    }
}

pub fn should_redistribute(sync: &SyncSchedule, t: usize) -> bool {
    sync.c > 0 && t >= sync.t_prime && t.is_multiple_of(sync.c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Learner 1 adversarial l-inf, learner 2 natural.
    DNatLinf,
    /// Learner 1 adversarial l-inf, learner 2 adversarial l2.
    DLinfL2,
    /// Learner 1 adversarial l-inf, learner 2 natural, learner 3 adversarial l2.
    TNatLinfL2,
}

impl Variant {
    pub fn learner_count(self) -> usize {
        match self {
            Variant::DNatLinf | Variant::DLinfL2 => 2,
            Variant::TNatLinfL2 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralistConfig {
    pub variant: Variant,
    pub gamma1: GammaSchedule,
    /// Share of the remainder given to learner 2 in the triple variant.
    pub b: f64,
    /// EMA decay of the global learner.
    pub ema_decay: f64,
    pub sync: SyncSchedule,
    /// Aggregate each learner's weight-averaging buffer instead of its raw parameters.
    pub aggregate_wa: bool,
    /// Clear optimizer slots and WA buffers when parameters are redistributed.
    pub reset_on_redistribute: bool,
    /// Step learners concurrently within a minibatch.
    pub parallel: bool,
}

impl GeneralistConfig {
    pub fn new(variant: Variant, total_epochs: usize) -> Self {
        Self {
            variant,
            gamma1: GammaSchedule::default(),
            b: 0.5,
            ema_decay: 0.999,
            sync: SyncSchedule::scaled_default(total_epochs),
            aggregate_wa: false,
            reset_on_redistribute: true,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gamma1.validate()?;
        self.sync.validate()?;
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("b = {} outside [0, 1]", self.b)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }
}

/// Mixing weights for the epoch with the given 0-based index. Progress is
/// `epoch / (T - 1)`, so the last epoch sees the final breakpoint.
pub fn mixing_weights(config: &GeneralistConfig, epoch: usize) -> Result<Vec<f64>> {
    let total = config.sync.total_epochs;
    if epoch >= total {
        return Err(Error::Domain(format!("epoch {epoch} outside 0..{total}")));
    }
    let progress = if total > 1 {
        epoch as f64 / (total - 1) as f64
    } else {
        0.0
    };
    let g1 = gamma_at(&config.gamma1, progress)?;
    let weights = match config.variant {
        Variant::DNatLinf | Variant::DLinfL2 => vec![g1, 1.0 - g1],
        Variant::TNatLinfL2 => {
            let rest = 1.0 - g1;
            vec![g1, config.b * rest, (1.0 - config.b) * rest]
        }
    };
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Config(format!("invalid mixing weights {weights:?}")));
    }
    Ok(weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalEvent {
    Ema,
    Redistribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub event: GlobalEvent,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub theta_g: ParameterVector,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<HistoryEntry>,
    /// Global parameters before the most recent aggregation.
    pub previous: Option<ParameterVector>,
}

impl GlobalState {
    pub fn new(theta_g: ParameterVector) -> Self {
        Self {
            theta_g,
            epoch: 0,
            history: Vec::new(),
            previous: None,
        }
    }

    /// History as JSON lines.
    pub fn history_jsonl(&self) -> String {
        let mut out = String::new();
        for h in &self.history {
            out.push_str(&serde_json::to_string(h).expect("history serializes"));
            out.push('\n');
        }
        out
    }
}

/// `theta_g <- alpha theta_g + (1 - alpha) mixed`.
pub fn ema_aggregate(state: &mut GlobalState, mixed: &ParameterVector, alpha: f64, weights: &[f64]) -> Result<()> {
    state.theta_g.check_compatible(mixed)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("EMA decay {alpha} outside [0, 1]")));
    }
    let prev = state.theta_g.clone();
    for (g, m) in state.theta_g.as_mut_slice().iter_mut().zip(mixed.as_slice()) {
        *g = alpha * *g + (1.0 - alpha) * m;
    }
    state.previous = Some(prev);
    state.history.push(HistoryEntry {
        epoch: state.epoch,
        event: GlobalEvent::Ema,
        weights: weights.to_vec(),
    });
    Ok(())
}

/// Copies the global parameters into every learner.
pub fn redistribute(state: &mut GlobalState, learners: &mut [BaseLearner], reset_state: bool) -> Result<()> {
    for l in learners.iter() {
        state.theta_g.check_compatible(l.model.params())?;
    }
    for l in learners.iter_mut() {
        l.reset_to(&state.theta_g, reset_state)?;
    }
    state.history.push(HistoryEntry {
        epoch: state.epoch,
        event: GlobalEvent::Redistribute,
        weights: Vec::new(),
    });
    Ok(())
}

/// Per-epoch minibatch sequences.
pub trait EpochSource {
    fn epoch_batches(&self, epoch: usize) -> Vec<Batch>;
}

impl EpochSource for Vec<Batch> {
    fn epoch_batches(&self, _epoch: usize) -> Vec<Batch> {
        self.clone()
    }
}

/// Per-learner, per-batch hook standing in for the optional augmentation
/// or label-smoothing steps. The default is the identity.
pub type BatchHook = Arc<dyn Fn(usize, &Batch) -> Batch + Send + Sync>;

/// Anything that trains one epoch at a time and exposes a model to evaluate.
pub trait Trainer {
    fn run_epoch(&mut self, batches: &[Batch]) -> Result<()>;
    fn epochs_done(&self) -> usize;
    fn eval_model(&self) -> Model;
}

#[derive(Clone)]
pub struct GeneralistRun {
    pub config: GeneralistConfig,
    pub learners: Vec<BaseLearner>,
    pub global: GlobalState,
    /// Learner parameters fed into the most recent aggregation.
    pub last_mixed_inputs: Vec<ParameterVector>,
    pub hook: Option<BatchHook>,
}

impl std::fmt::Debug for GeneralistRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneralistRun")
            .field("config", &self.config)
            .field("learners", &self.learners.len())
            .field("epoch", &self.global.epoch)
            .finish()
    }
}

impl GeneralistRun {
    pub fn new(config: GeneralistConfig, learners: Vec<BaseLearner>, theta_g: ParameterVector) -> Result<Self> {
        config.validate()?;
        if learners.len() != config.variant.learner_count() {
            return Err(Error::Config(format!(
                "variant {:?} needs {} learners, got {}",
                config.variant,
                config.variant.learner_count(),
                learners.len()
            )));
        }
        for l in &learners {
            theta_g.check_compatible(l.model.params())?;
            if l.model.layer_sizes() != learners[0].model.layer_sizes()
                || l.model.activation() != learners[0].model.activation()
            {
                return Err(Error::Config("all learners must share one architecture".into()));
            }
        }
        Ok(Self {
            config,
            learners,
            global: GlobalState::new(theta_g),
            last_mixed_inputs: Vec::new(),
            hook: None,
        })
    }

    pub fn global_model(&self) -> Model {
        self.learners[0]
            .model
            .with_params(self.global.theta_g.clone())
            .expect("layout checked at construction")
    }

    fn step_learners(&mut self, batch: &Batch, epoch: usize) -> Result<()> {
        let hook = self.hook.clone();
        let step = |(i, l): (usize, &mut BaseLearner)| -> Result<()> {
            let b = match &hook {
                Some(h) => h(i, batch),
                None => batch.clone(),
            };
            l.train_batch(&b, epoch).map(|_| ()).map_err(|e| Error::Diverged {
                learner: i,
                source: Box::new(e),
            })
        };
        if self.config.parallel {
            self.learners
                .par_iter_mut()
                .enumerate()
                .map(step)
                .collect::<Result<Vec<_>>>()?;
        } else {
            self.learners.iter_mut().enumerate().try_for_each(step)?;
        }
        Ok(())
    }

    fn aggregate(&mut self, weights: &[f64]) -> Result<()> {
        let use_wa = self.config.aggregate_wa;
        let inputs: Vec<&ParameterVector> = self.learners.iter().map(|l| l.params(use_wa)).collect();
        let mixed = convex_combine(&inputs, weights)?;
        self.last_mixed_inputs = inputs.into_iter().cloned().collect();
        ema_aggregate(&mut self.global, &mixed, self.config.ema_decay, weights)
    }
}

impl Trainer for GeneralistRun {
    fn run_epoch(&mut self, batches: &[Batch]) -> Result<()> {
        let epoch = self.global.epoch;
        let weights = mixing_weights(&self.config, epoch)?;
        for batch in batches {
            self.step_learners(batch, epoch)?;
            self.aggregate(&weights)?;
        }
        self.global.epoch += 1;
        if should_redistribute(&self.config.sync, self.global.epoch) {
            let reset = self.config.reset_on_redistribute;
            redistribute(&mut self.global, &mut self.learners, reset)?;
        }
        Ok(())
    }

    fn epochs_done(&self) -> usize {
        self.global.epoch
    }

    fn eval_model(&self) -> Model {
        self.global_model()
    }
}

/// Trains for the remaining epochs of the sync schedule, calling `on_epoch`
/// after each one, and returns the global model.
pub fn train_generalist<S, F>(run: &mut GeneralistRun, data: &S, mut on_epoch: F) -> Result<Model>
where
    S: EpochSource + ?Sized,
    F: FnMut(&GeneralistRun) -> Result<()>,
{
    while run.global.epoch < run.config.sync.total_epochs {
        let batches = data.epoch_batches(run.global.epoch);
        run.run_epoch(&batches)?;
        on_epoch(run)?;
    }
    Ok(run.global_model())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// l-inf adversarial loss only.
    AtVanilla,
    /// Half natural, half l-inf adversarial loss.
    AtHalfhalf,
    /// Half l-inf, half l2 adversarial loss.
    AtAvgNorm,
}

/// A single jointly-trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrainer {
    pub mode: BaselineMode,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub schedule: ScheduleSpec,
    pub linf: AttackSpec,
    pub l2: AttackSpec,
    pub rng_linf: RngStream,
    pub rng_l2: RngStream,
    pub epoch: usize,
}

impl JointTrainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: BaselineMode,
        model: Model,
        optimizer: OptimizerState,
        schedule: ScheduleSpec,
        linf: AttackSpec,
        l2: AttackSpec,
        rng_linf: RngStream,
        rng_l2: RngStream,
    ) -> Result<Self> {
        linf.validate()?;
        l2.validate()?;
        schedule.validate()?;
        for s in &optimizer.slots {
            model.params().check_compatible(s)?;
        }
        Ok(Self {
            mode,
            model,
            optimizer,
            schedule,
            linf,
            l2,
            rng_linf,
            rng_l2,
            epoch: 0,
        })
    }

    /// One optimizer step on the mode's averaged loss; returns that loss.
    pub fn train_batch(&mut self, batch: &Batch, epoch: usize) -> Result<f64> {
        let mut parts: Vec<Batch> = Vec::with_capacity(2);
        match self.mode {
            BaselineMode::AtVanilla => {
                let x = pgd_attack(&self.model, batch, &self.linf, &mut self.rng_linf)?;
                parts.push(batch.with_inputs(x));
            }
            BaselineMode::AtHalfhalf => {
                parts.push(batch.clone());
                let x = pgd_attack(&self.model, batch, &self.linf, &mut self.rng_linf)?;
                parts.push(batch.with_inputs(x));
            }
            BaselineMode::AtAvgNorm => {
                let x = pgd_attack(&self.model, batch, &self.linf, &mut self.rng_linf)?;
                parts.push(batch.with_inputs(x));
                let x = pgd_attack(&self.model, batch, &self.l2, &mut self.rng_l2)?;
                parts.push(batch.with_inputs(x));
            }
        }
        let grads = parts
            .iter()
            .map(|b| self.model.backward(b))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = if grads.len() == 1 {
            (grads[0].loss, grads[0].params.clone())
        } else {
            let mut g = grads[0].params.clone();
            for (a, b) in g.as_mut_slice().iter_mut().zip(grads[1].params.as_slice()) {
                *a = 0.5 * *a + 0.5 * b;
            }
            (0.5 * grads[0].loss + 0.5 * grads[1].loss, g)
        };
        let lr = lr_at(&self.schedule, self.optimizer.lr0, epoch)?;
        self.optimizer.apply(self.model.params_mut(), &grad, lr)?;
        self.model
            .params()
            .ensure_finite()
            .map_err(|e| Error::Diverged {
                learner: 0,
                source: Box::new(e),
            })?;
        Ok(loss)
    }
}

impl Trainer for JointTrainer {
    fn run_epoch(&mut self, batches: &[Batch]) -> Result<()> {
        let epoch = self.epoch;
        for b in batches {
            self.train_batch(b, epoch)?;
        }
        self.epoch += 1;
        Ok(())
    }

    fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn eval_model(&self) -> Model {
        self.model.clone()
    }
}

/// Joint-training baseline for `epochs` epochs.
pub fn train_baseline<S, F>(trainer: &mut JointTrainer, data: &S, epochs: usize, mut on_epoch: F) -> Result<Model>
where
    S: EpochSource + ?Sized,
    F: FnMut(&JointTrainer) -> Result<()>,
{
    while trainer.epoch < epochs {
        let batches = data.epoch_batches(trainer.epoch);
        trainer.run_epoch(&batches)?;
        on_epoch(trainer)?;
    }
    Ok(trainer.model.clone())
}
