//! Experiment configuration.
//!
//! The file format is TOML restricted to flat `section.key = value` pairs,
//! e.g. `sync.c = 5`. Every key has a default; an empty file is the
//! desk-scale default experiment.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::error::{Error, Result};
use crate::generalist::{BaselineMode, GammaSchedule, Variant};
use crate::learner::OptimizerKind;
use crate::model::Activation;
use crate::numeric::Norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GeneralistDNatLinf,
    GeneralistDLinfL2,
    GeneralistT,
    AtVanilla,
    AtHalfhalf,
    AtAvgNorm,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::GeneralistDNatLinf,
        Method::GeneralistDLinfL2,
        Method::GeneralistT,
        Method::AtVanilla,
        Method::AtHalfhalf,
        Method::AtAvgNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GeneralistDNatLinf => "generalist_d_nat_linf",
            Method::GeneralistDLinfL2 => "generalist_d_linf_l2",
            Method::GeneralistT => "generalist_t",
            Method::AtVanilla => "at_vanilla",
            Method::AtHalfhalf => "at_halfhalf",
            Method::AtAvgNorm => "at_avg_norm",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::GeneralistDNatLinf => Some(Variant::DNatLinf),
            Method::GeneralistDLinfL2 => Some(Variant::DLinfL2),
            Method::GeneralistT => Some(Variant::TNatLinfL2),
            _ => None,
        }
    }

    pub fn baseline(self) -> Option<BaselineMode> {
        match self {
            Method::AtVanilla => Some(BaselineMode::AtVanilla),
            Method::AtHalfhalf => Some(BaselineMode::AtHalfhalf),
            Method::AtAvgNorm => Some(BaselineMode::AtAvgNorm),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Gaussians,
    Rings,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub batch_size: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Gaussians,
            n_train: 1000,
            n_test: 500,
            dim: 8,
            classes: 2,
            separation: 0.5,
            batch_size: 50,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate is constant through this epoch, then decays linearly.
    pub constant_until: usize,
    pub terminal_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            constant_until: 20,
            terminal_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: Option<f64>,
    pub steps: Option<usize>,
    pub random_start: Option<bool>,
}

impl AttackConfig {
    fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: None,
            steps: None,
            random_start: None,
        }
    }

    /// Fills unset fields from `base`.
    pub fn resolve(&self, base: AttackSpec) -> AttackSpec {
        AttackSpec {
            norm: base.norm,
            epsilon: self.epsilon,
            step_size: self.step_size.unwrap_or(base.step_size),
            steps: self.steps.unwrap_or(base.steps),
            random_start: self.random_start.unwrap_or(base.random_start),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormPair {
    pub linf: AttackConfig,
    pub l2: AttackConfig,
}

impl Default for NormPair {
    fn default() -> Self {
        Self {
            linf: AttackConfig::new(0.05),
            l2: AttackConfig::new(0.25),
        }
    }
}

impl NormPair {
    pub fn training_specs(&self) -> (AttackSpec, AttackSpec) {
        (
            self.linf.resolve(AttackSpec::training(Norm::Linf, self.linf.epsilon)),
            self.l2.resolve(AttackSpec::training(Norm::L2, self.l2.epsilon)),
        )
    }

    pub fn evaluation_specs(&self) -> (AttackSpec, AttackSpec) {
        (
            self.linf.resolve(AttackSpec::evaluation(Norm::Linf, self.linf.epsilon)),
            self.l2.resolve(AttackSpec::evaluation(Norm::L2, self.l2.epsilon)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub optimizer: OptimizerName,
    /// Defaults to 0.1 for SGD and 1e-4 for Adam.
    pub lr0: Option<f64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub weight_decay: f64,
    /// Per-step weight-averaging decay; absent disables averaging.
    pub wa_decay: Option<f64>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerName::Sgd,
            lr0: None,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            weight_decay: 0.0,
            wa_decay: None,
        }
    }
}

impl LearnerConfig {
    pub fn lr0(&self) -> f64 {
        self.lr0.unwrap_or(match self.optimizer {
            OptimizerName::Sgd => 0.1,
            OptimizerName::Adam => 1e-4,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::SgdMomentum {
                momentum: self.momentum,
            },
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                eps_hat: self.eps_hat,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerRoster {
    pub natural: LearnerConfig,
    pub linf: LearnerConfig,
    pub l2: LearnerConfig,
    /// Optimizer of the single jointly-trained baseline model.
    pub joint: LearnerConfig,
}

impl Default for LearnerRoster {
    fn default() -> Self {
        let c = LearnerConfig::default();
        Self {
            natural: c,
            linf: c,
            l2: c,
            joint: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralistSection {
    pub ema_decay: f64,
    pub gamma1: Vec<[f64; 2]>,
    pub b: f64,
    pub aggregate_wa: bool,
    pub reset_on_redistribute: bool,
    pub parallel: bool,
}

impl Default for GeneralistSection {
    fn default() -> Self {
        Self {
            ema_decay: 0.95,
            gamma1: GammaSchedule::default()
                .breakpoints
                .iter()
                .map(|&(x, y)| [x, y])
                .collect(),
            b: 0.5,
            aggregate_wa: false,
            reset_on_redistribute: true,
            parallel: false,
        }
    }
}

impl GeneralistSection {
    pub fn gamma_schedule(&self) -> GammaSchedule {
        GammaSchedule {
            breakpoints: self.gamma1.iter().map(|p| (p[0], p[1])).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncSection {
    /// Defaults to 62.5% of `train.epochs`.
    pub t_prime: Option<usize>,
    /// Defaults to 5.
    pub c: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Record real elapsed time in metrics; off keeps JSONL reproducible.
    pub record_wall_time: bool,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: NormPair,
    pub eval: NormPair,
    pub generalist: GeneralistSection,
    pub sync: SyncSection,
    pub learner: LearnerRoster,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::GeneralistDNatLinf,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attack: NormPair::default(),
            eval: NormPair::default(),
            generalist: GeneralistSection::default(),
            sync: SyncSection::default(),
            learner: LearnerRoster::default(),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn t_prime(&self) -> usize {
        self.sync
            .t_prime
            .unwrap_or_else(|| (self.train.epochs as f64 * 0.625).round() as usize)
    }

    pub fn c(&self) -> usize {
        self.sync.c.unwrap_or(5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.train.constant_until > self.train.epochs {
            return Err(Error::Config("train.constant_until exceeds train.epochs".into()));
        }
        if self.data.batch_size == 0 {
            return Err(Error::Config("data.batch_size must be >= 1".into()));
        }
        if self.c() == 0 {
            return Err(Error::Config("sync.c must be >= 1".into()));
        }
        if self.t_prime() > self.train.epochs {
            return Err(Error::Config("sync.t_prime exceeds train.epochs".into()));
        }
        self.generalist.gamma_schedule().validate()?;
        Ok(())
    }
}
