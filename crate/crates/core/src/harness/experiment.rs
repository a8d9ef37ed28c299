//! Builds trainers from a config, runs them epoch by epoch, and converts
//! their state to and from checkpoints.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::generalist::{
    EpochSource, GammaSchedule, GeneralistConfig, GeneralistRun, HistoryEntry, JointTrainer, SyncSchedule, Trainer,
    Variant,
};
use crate::harness::checkpoint::{Checkpoint, LearnerSnapshot};
use crate::harness::config::{DataKind, ExperimentConfig, LearnerConfig, Method};
use crate::harness::data::{gen_gaussians, gen_rings, load_idx_split, DatasetHandle, EpochPlan};
use crate::harness::metrics::{evaluate, MetricsRecord};
use crate::learner::{BaseLearner, OptimizerState, ScheduleSpec, Task};
use crate::model::{Batch, Model};
use crate::numeric::{LayoutId, ParameterVector, RngStream};

/// Stream of the shared parameter initialization.
pub const INIT_STREAM: u64 = 0;
/// Attack streams are `ATTACK_STREAM_BASE + learner index`.
pub const ATTACK_STREAM_BASE: u64 = 100;

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<DatasetHandle> {
    let d = &cfg.data;
    match d.kind {
        DataKind::Gaussians => gen_gaussians(cfg.seed, d.n_train, d.n_test, d.dim, d.classes, d.separation),
        DataKind::Rings => gen_rings(cfg.seed, d.n_train, d.n_test, d.dim, d.classes),
        DataKind::Idx => {
            let need = |p: &Option<std::path::PathBuf>, key: &str| {
                p.clone().ok_or_else(|| Error::Config(format!("data.{key} is required for idx data")))
            };
            let (ti, tl) = (need(&d.train_images, "train_images")?, need(&d.train_labels, "train_labels")?);
            let (vi, vl) = (need(&d.test_images, "test_images")?, need(&d.test_labels, "test_labels")?);
            load_idx_split((&ti, &tl), (&vi, &vl))
        }
    }
}

/// Learner tasks in mixing order for each variant.
pub fn variant_tasks(v: Variant) -> Vec<Task> {
    match v {
        Variant::DNatLinf => vec![Task::AdvLinf, Task::Natural],
        Variant::DLinfL2 => vec![Task::AdvLinf, Task::AdvL2],
        Variant::TNatLinfL2 => vec![Task::AdvLinf, Task::Natural, Task::AdvL2],
    }
}

#[derive(Debug, Clone)]
pub enum TrainerState {
    Generalist(GeneralistRun),
    Joint(JointTrainer),
}

impl TrainerState {
    fn as_trainer(&mut self) -> &mut dyn Trainer {
        match self {
            TrainerState::Generalist(r) => r,
            TrainerState::Joint(j) => j,
        }
    }

    pub fn epochs_done(&self) -> usize {
        match self {
            TrainerState::Generalist(r) => r.epochs_done(),
            TrainerState::Joint(j) => j.epochs_done(),
        }
    }

    pub fn eval_model(&self) -> Model {
        match self {
            TrainerState::Generalist(r) => r.eval_model(),
            TrainerState::Joint(j) => j.eval_model(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Text stored in checkpoints; reparsing it rebuilds this experiment.
    pub config_text: String,
    pub data: DatasetHandle,
    pub trainer: TrainerState,
}

fn schedule(cfg: &ExperimentConfig) -> ScheduleSpec {
    ScheduleSpec {
        constant_until: cfg.train.constant_until,
        total_epochs: cfg.train.epochs,
        terminal_fraction: cfg.train.terminal_fraction,
    }
}

fn optimizer(lc: &LearnerConfig, like: &ParameterVector) -> Result<OptimizerState> {
    OptimizerState::new(lc.kind(), lc.lr0(), lc.weight_decay, like)
}

pub fn generalist_config(cfg: &ExperimentConfig, variant: Variant) -> GeneralistConfig {
    let g = &cfg.generalist;
    GeneralistConfig {
        variant,
        gamma1: GammaSchedule {
            breakpoints: g.gamma_schedule().breakpoints,
        },
        b: g.b,
        ema_decay: g.ema_decay,
        sync: SyncSchedule {
            t_prime: cfg.t_prime(),
            c: cfg.c(),
            total_epochs: cfg.train.epochs,
        },
        aggregate_wa: g.aggregate_wa,
        reset_on_redistribute: g.reset_on_redistribute,
        parallel: g.parallel,
    }
}

fn build_trainer(cfg: &ExperimentConfig, data: &DatasetHandle) -> Result<TrainerState> {
    let mut sizes = vec![data.d];
    sizes.extend(&cfg.model.hidden);
    sizes.push(data.k);
    let model = Model::init(sizes, cfg.model.activation, &mut RngStream::new(cfg.seed, INIT_STREAM))?;
    let (linf, l2) = cfg.attack.training_specs();
    if let Some(variant) = cfg.method.variant() {
        let learners = variant_tasks(variant)
            .into_iter()
            .enumerate()
            .map(|(i, task)| {
                let lc = match task {
                    Task::Natural => &cfg.learner.natural,
                    Task::AdvLinf => &cfg.learner.linf,
                    Task::AdvL2 => &cfg.learner.l2,
                };
                let attack = match task {
                    Task::Natural => None,
                    Task::AdvLinf => Some(linf),
                    Task::AdvL2 => Some(l2),
                };
                BaseLearner::new(
                    task,
                    model.clone(),
                    optimizer(lc, model.params())?,
                    attack,
                    lc.wa_decay,
                    schedule(cfg),
                    RngStream::new(cfg.seed, ATTACK_STREAM_BASE + i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let run = GeneralistRun::new(generalist_config(cfg, variant), learners, model.params().clone())?;
        Ok(TrainerState::Generalist(run))
    } else {
        let mode = cfg.method.baseline().expect("every method is a variant or a baseline");
        let opt = optimizer(&cfg.learner.joint, model.params())?;
        let joint = JointTrainer::new(
            mode,
            model,
            opt,
            schedule(cfg),
            linf,
            l2,
            RngStream::new(cfg.seed, ATTACK_STREAM_BASE),
            RngStream::new(cfg.seed, ATTACK_STREAM_BASE + 1),
        )?;
        Ok(TrainerState::Joint(joint))
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let config_text = config.to_text();
        let data = load_dataset(&config)?;
        let trainer = build_trainer(&config, &data)?;
        Ok(Self {
            config,
            config_text,
            data,
            trainer,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.trainer.epochs_done()
    }

    pub fn finished(&self) -> bool {
        self.epochs_done() >= self.config.train.epochs
    }

    pub fn model(&self) -> Model {
        self.trainer.eval_model()
    }

    pub fn history(&self) -> &[HistoryEntry] {
        match &self.trainer {
            TrainerState::Generalist(r) => &r.global.history,
            TrainerState::Joint(_) => &[],
        }
    }

    fn epoch_batches(&self, epoch: usize) -> Vec<Batch> {
        EpochPlan {
            data: &self.data.train,
            batch_size: self.config.data.batch_size,
            seed: self.config.seed,
        }
        .epoch_batches(epoch)
    }

    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let (linf, l2) = self.config.eval.evaluation_specs();
        let mut rec = evaluate(&self.model(), &self.data, &linf, &l2)?;
        rec.epoch = self.epochs_done();
        Ok(rec)
    }

    /// Trains one epoch and evaluates the resulting model on the test split.
    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        if self.finished() {
            return Err(Error::Domain("all epochs already trained".into()));
        }
        let start = Instant::now();
        let batches = self.epoch_batches(self.epochs_done());
        self.trainer.as_trainer().run_epoch(&batches)?;
        let mut rec = self.evaluate()?;
        if self.config.output.record_wall_time {
            rec.wall_time_ms = start.elapsed().as_millis() as u64;
        }
        Ok(rec)
    }

    /// Runs the remaining epochs, passing each record to `on_epoch`.
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<Vec<MetricsRecord>>
    where
        F: FnMut(&Experiment, &MetricsRecord) -> Result<()>,
    {
        let mut out = Vec::new();
        while !self.finished() {
            let rec = self.run_epoch()?;
            on_epoch(self, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match &self.trainer {
            TrainerState::Generalist(r) => Checkpoint {
                config_text: self.config_text.clone(),
                epoch: r.global.epoch as u64,
                layout: r.global.theta_g.layout().0,
                theta_g: r.global.theta_g.as_slice().to_vec(),
                previous: r.global.previous.as_ref().map(|p| p.as_slice().to_vec()),
                learners: r
                    .learners
                    .iter()
                    .map(|l| LearnerSnapshot {
                        params: l.model.params().as_slice().to_vec(),
                        slots: l.optimizer.slots.iter().map(|s| s.as_slice().to_vec()).collect(),
                        step: l.optimizer.step,
                        wa: l.wa.as_ref().map(|w| w.buffer.as_slice().to_vec()),
                        rngs: vec![l.rng.state()],
                    })
                    .collect(),
                history: r.global.history.clone(),
            },
            TrainerState::Joint(j) => Checkpoint {
                config_text: self.config_text.clone(),
                epoch: j.epoch as u64,
                layout: j.model.layout().0,
                theta_g: j.model.params().as_slice().to_vec(),
                previous: None,
                learners: vec![LearnerSnapshot {
                    params: j.model.params().as_slice().to_vec(),
                    slots: j.optimizer.slots.iter().map(|s| s.as_slice().to_vec()).collect(),
                    step: j.optimizer.step,
                    wa: None,
                    rngs: vec![j.rng_linf.state(), j.rng_l2.state()],
                }],
                history: Vec::new(),
            },
        }
    }

    /// Rebuilds the experiment from the checkpoint's config and restores
    /// all trainer state.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ExperimentConfig::parse(&ckpt.config_text)?;
        let mut exp = Experiment::new(config)?;
        exp.config_text = ckpt.config_text.clone();
        let layout = LayoutId(ckpt.layout);
        let pv = |v: &[f64]| ParameterVector::new(v.to_vec(), layout);
        let bad = |what: &str| Error::Corrupt(format!("checkpoint does not match its config: {what}"));
        match &mut exp.trainer {
            TrainerState::Generalist(r) => {
                if ckpt.learners.len() != r.learners.len() {
                    return Err(bad("learner count"));
                }
                r.global.theta_g.check_compatible(&pv(&ckpt.theta_g)?)?;
                r.global.theta_g = pv(&ckpt.theta_g)?;
                r.global.previous = ckpt.previous.as_deref().map(pv).transpose()?;
                r.global.epoch = ckpt.epoch as usize;
                r.global.history = ckpt.history.clone();
                for (l, s) in r.learners.iter_mut().zip(&ckpt.learners) {
                    l.model.set_params(pv(&s.params)?)?;
                    restore_slots(&mut l.optimizer, s, layout)?;
                    match (&mut l.wa, &s.wa) {
                        (Some(w), Some(b)) => w.buffer = pv(b)?,
                        (None, None) => {}
                        _ => return Err(bad("weight averaging")),
                    }
                    let [rng] = s.rngs.as_slice() else {
                        return Err(bad("learner streams"));
                    };
                    l.rng = RngStream::from_state(*rng);
                }
            }
            TrainerState::Joint(j) => {
                let [s] = ckpt.learners.as_slice() else {
                    return Err(bad("learner count"));
                };
                j.model.set_params(pv(&s.params)?)?;
                restore_slots(&mut j.optimizer, s, layout)?;
                let [a, b] = s.rngs.as_slice() else {
                    return Err(bad("baseline streams"));
                };
                j.rng_linf = RngStream::from_state(*a);
                j.rng_l2 = RngStream::from_state(*b);
                j.epoch = ckpt.epoch as usize;
            }
        }
        if exp.epochs_done() > exp.config.train.epochs {
            return Err(bad("epoch beyond training length"));
        }
        Ok(exp)
    }
}

fn restore_slots(opt: &mut OptimizerState, s: &LearnerSnapshot, layout: LayoutId) -> Result<()> {
    if s.slots.len() != opt.slots.len() {
        return Err(Error::Corrupt("optimizer slot count does not match config".into()));
    }
    for (dst, src) in opt.slots.iter_mut().zip(&s.slots) {
        let v = ParameterVector::new(src.clone(), layout)?;
        dst.check_compatible(&v)?;
        *dst = v;
    }
    opt.step = s.step;
    Ok(())
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: Method,
    pub record: MetricsRecord,
}

pub const COMPARE_HEADER: &str = "method,natural,pgd_linf,pgd_l2,union";

/// Trains every method of the roster on the base config and reports the
/// final test metrics of each.
pub fn compare(base: &ExperimentConfig, roster: &[Method]) -> Result<Vec<CompareRow>> {
    roster
        .iter()
        .map(|&method| {
            let cfg = ExperimentConfig {
                method,
                ..base.clone()
            };
            let mut exp = Experiment::new(cfg)?;
            let recs = exp.run(|_, _| Ok(()))?;
            Ok(CompareRow {
                method,
                record: recs.last().cloned().expect("at least one epoch"),
            })
        })
        .collect()
}

/// Accuracies are written as percentages with two decimals.
pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(COMPARE_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.record;
        out.push_str(&format!(
            "{},{:.2},{:.2},{:.2},{:.2}\n",
            r.method.name(),
            100.0 * m.natural_acc,
            100.0 * m.robust_acc_linf,
            100.0 * m.robust_acc_l2,
            crate::harness::metrics::union_rounded(100.0 * m.robust_acc_linf, 100.0 * m.robust_acc_l2, 2),
        ));
    }
    out
}
