//! Learning strategies: the rehearsal-and-isolation method built around
//! temporary nets, and the six reference baselines it is compared against.
//! All of them plug into the request protocol through [`apply_request`].

mod baselines;
mod clpu;
mod train;

use crate::data::Dataset;
use crate::protocol::{EngineError, EngineState, Instruction, Request, TaskId};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("weight decay must be nonnegative and finite, got {0}")]
    BadWeightDecay(f64),
    #[error("epochs must be at least 1")]
    NoEpochs,
    #[error("batch size must be at least 1")]
    NoBatch,
    #[error("memory size must be at least 1")]
    NoMemory,
    #[error("{name} must be nonnegative and finite, got {value}")]
    BadWeight { name: &'static str, value: f64 },
    #[error("beta must lie in (0, 1], got {0}")]
    BadBeta(f64),
    #[error("alpha1 and alpha2 must not both be zero")]
    NoReplayLoss,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
}

/// Which learner handles the request sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StrategyKind {
    /// Plain sequential fine-tuning of one net.
    #[serde(rename = "seq")]
    Seq,
    /// One independent net per task.
    #[serde(rename = "ind")]
    Ind,
    /// Quadratic penalties around per-task anchors.
    #[serde(rename = "ewc")]
    Ewc,
    /// Distillation against a snapshot taken before each new task.
    #[serde(rename = "lwf")]
    Lwf,
    /// Episodic replay of stored examples.
    #[serde(rename = "er")]
    Er,
    /// Replay of stored examples and stored logits.
    #[serde(rename = "der++")]
    DerPp,
    /// Dark-replay main net plus temporary nets for forgettable tasks.
    #[serde(rename = "clpu-der++")]
    ClpuDerPp,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Seq,
        StrategyKind::Ind,
        StrategyKind::Ewc,
        StrategyKind::Lwf,
        StrategyKind::Er,
        StrategyKind::DerPp,
        StrategyKind::ClpuDerPp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Seq => "seq",
            StrategyKind::Ind => "ind",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Lwf => "lwf",
            StrategyKind::Er => "er",
            StrategyKind::DerPp => "der++",
            StrategyKind::ClpuDerPp => "clpu-der++",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// How a temporary net starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TempInit {
    /// Copy the current main net.
    #[serde(rename = "from-main")]
    FromMain,
    /// Fresh random init from the task's own stream.
    #[serde(rename = "scratch")]
    Scratch,
}

/// Which stored memories the main net rehearses during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RehearsalScope {
    /// Only memories of permanently retained tasks. The main net's history
    /// then never depends on temporary tasks, which is what makes forgetting
    /// them exact.
    #[serde(rename = "permanent-only")]
    PermanentOnly,
    /// Every stored memory, temporary tasks included. Forgetting is no
    /// longer exact in this mode; it exists to demonstrate the leak.
    #[serde(rename = "all-tasks")]
    AllTasks,
}

/// Hyperparameters shared by every strategy. Fields irrelevant to a given
/// strategy are simply unused.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub ewc_lambda: f64,
    pub lwf_weight: f64,
    pub lwf_temperature: f64,
    pub memory_size: usize,
    pub temp_init: TempInit,
    pub rehearsal_scope: RehearsalScope,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            lr: 0.01,
            weight_decay: 0.0005,
            epochs: 10,
            batch_size: 32,
            alpha1: 0.5,
            alpha2: 0.5,
            beta: 0.5,
            ewc_lambda: 100.0,
            lwf_weight: 1.0,
            lwf_temperature: 2.0,
            memory_size: 64,
            temp_init: TempInit::FromMain,
            rehearsal_scope: RehearsalScope::PermanentOnly,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::BadLearningRate(self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ConfigError::BadWeightDecay(self.weight_decay));
        }
        if self.epochs == 0 {
            return Err(ConfigError::NoEpochs);
        }
        if self.batch_size == 0 {
            return Err(ConfigError::NoBatch);
        }
        if self.memory_size == 0 {
            return Err(ConfigError::NoMemory);
        }
        for (name, value) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("ewc_lambda", self.ewc_lambda),
            ("lwf_weight", self.lwf_weight),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ConfigError::BadWeight { name, value });
            }
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(ConfigError::BadBeta(self.beta));
        }
        if self.alpha1 == 0.0 && self.alpha2 == 0.0 {
            return Err(ConfigError::NoReplayLoss);
        }
        if !(self.lwf_temperature > 0.0 && self.lwf_temperature.is_finite()) {
            return Err(ConfigError::BadTemperature(self.lwf_temperature));
        }
        Ok(())
    }
}

/// Per-task anchor for the quadratic-penalty baseline: the parameters to
/// stay near and the curvature weighting each coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcAnchor {
    pub params: Vec<f64>,
    pub fisher: Vec<f64>,
}

/// Strategy-private state that lives alongside the registry. Anything here
/// keyed by a task id must disappear when that task is forgotten.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyAux {
    None,
    Ewc { anchors: BTreeMap<TaskId, EwcAnchor> },
}

/// Routes one already-validated request to the strategy. Runs against the
/// pre-update status dictionary; the caller applies the status change
/// afterwards.
pub fn apply_request(
    state: &mut EngineState,
    req: &Request,
    dataset: Option<&Dataset>,
    _t: usize,
    cfg: &StrategyConfig,
) -> Result<(), EngineError> {
    match req.instruction {
        Instruction::F => forget(state, req.task, cfg),
        Instruction::R | Instruction::T => {
            match state.status.get(req.task).map(|e| e.instruction) {
                Some(Instruction::R) => Ok(()),
                Some(Instruction::T) => promote(state, req.task, cfg),
                _ => {
                    let data = dataset.ok_or(EngineError::DatasetRequired(req.task))?;
                    learn(state, req.task, data, req.instruction, cfg)
                }
            }
        }
    }
}

fn learn(
    state: &mut EngineState,
    task: TaskId,
    data: &Dataset,
    instruction: Instruction,
    cfg: &StrategyConfig,
) -> Result<(), EngineError> {
    match state.strategy {
        StrategyKind::Seq => baselines::seq_learn(state, task, data, cfg),
        StrategyKind::Ind => baselines::ind_learn(state, task, data, cfg),
        StrategyKind::Ewc => baselines::ewc_learn(state, task, data, cfg),
        StrategyKind::Lwf => baselines::lwf_learn(state, task, data, cfg),
        StrategyKind::Er => baselines::replay_learn(state, task, data, cfg, false),
        StrategyKind::DerPp => baselines::replay_learn(state, task, data, cfg, true),
        StrategyKind::ClpuDerPp => clpu::learn(state, task, data, instruction, cfg),
    }
}

fn promote(state: &mut EngineState, task: TaskId, cfg: &StrategyConfig) -> Result<(), EngineError> {
    match state.strategy {
        StrategyKind::ClpuDerPp => clpu::promote(state, task, cfg),
        _ => Ok(()),
    }
}

fn forget(state: &mut EngineState, task: TaskId, cfg: &StrategyConfig) -> Result<(), EngineError> {
    match state.strategy {
        StrategyKind::Seq | StrategyKind::Lwf => Ok(()),
        StrategyKind::Ind => {
            state.registry.temp.remove(&task);
            Ok(())
        }
        StrategyKind::Ewc => {
            if let StrategyAux::Ewc { anchors } = &mut state.aux {
                anchors.remove(&task);
            }
            Ok(())
        }
        StrategyKind::Er => baselines::replay_forget(state, task, cfg, false),
        StrategyKind::DerPp => baselines::replay_forget(state, task, cfg, true),
        StrategyKind::ClpuDerPp => {
            state.registry.temp.remove(&task);
            state.registry.memories.remove(&task);
            Ok(())
        }
    }
}
