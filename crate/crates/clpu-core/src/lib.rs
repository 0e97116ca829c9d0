//! Deterministic continual-learning engine with private unlearning.
//!
//! An agent processes a sequence of user requests, each asking it to learn a
//! task permanently (`R`), learn it temporarily (`T`), or forget a temporarily
//! learned task exactly and privately (`F`). The crate provides:
//!
//! - keyed deterministic random streams ([`rng`]), so removing one request
//!   from a sequence never perturbs the randomness any other request consumes;
//! - a small pure-functional neural-network kernel ([`nn`]): fully connected
//!   nets, cross-entropy / logit-MSE / distillation losses, exact reverse-mode
//!   gradients, plain SGD, and the Jensen-Shannon distance;
//! - benchmark construction ([`data`]): synthetic Gaussian-blob task families
//!   with rotation / permutation / class-split variants, plus IDX ingestion;
//! - the request protocol and agent state machine ([`protocol`]);
//! - the learners ([`strategies`]): the isolating temp-network learner
//!   (CLPU-DER++) and six baselines (Seq, Ind, EWC, LwF, ER, DER++);
//! - continual-learning and unlearning-audit metrics ([`metrics`]): ACC, FM,
//!   IJSD/AJSD, JS-ratio, IRR;
//! - experiment orchestration ([`harness`]): presets, multi-seed full/retain
//!   runs, binary checkpoints, and report emission.
//!
//! Everything is deterministic given (master seed, request sequence, config):
//! full runs and counterfactual retain runs can be compared bit-for-bit.

pub mod data;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod strategies;

pub use data::{Benchmark, BenchmarkFamily, BenchmarkSpec, Dataset, SplitData};
pub use harness::{run_experiment, ExperimentConfig, ExperimentReport, SequenceSpec};
pub use metrics::{AccuracyMatrix, AuditGroups};
pub use nn::{Arch, Batch, LossSpec, NetParams};
pub use protocol::{
    EngineState, EpisodicMemory, Instruction, ModelRegistry, Request, RunObserver, TaskId,
    TaskStatusMap,
};
pub use rng::{derive_stream, Label, RandStream, StreamKey};
pub use strategies::{RehearsalScope, StrategyConfig, StrategyKind, TempInit};
