//! The six reference strategies. All of them learn permanent and temporary
//! tasks the same way; only the isolating strategy treats the two kinds
//! differently, which is exactly the comparison the audit quantifies.

use crate::data::Dataset;
use crate::labels;
use crate::nn::{self, Batch, LossSpec};
use crate::protocol::{self, EngineError, EngineState, TaskId};
use crate::rng::derive_stream;
use crate::strategies::train::{self, EwcPenalty, Primary, RehearsalTerm, TrainJob};
use crate::strategies::{EwcAnchor, StrategyAux, StrategyConfig};

/// Plain fine-tuning of the main net on each new task.
pub(super) fn seq_learn(
    state: &mut EngineState,
    task: TaskId,
    data: &Dataset,
    cfg: &StrategyConfig,
) -> Result<(), EngineError> {
    let job = TrainJob {
        primary: Primary::Data { data, spec: LossSpec::ce(1.0) },
        rehearsal: Vec::new(),
        teacher: None,
        penalty: None,
        epochs: cfg.epochs,
        seed: state.master_seed,
        ctx: labels!["task", task, "learn"],
    };
    train::run(&mut state.registry.main, &job, cfg)
}

/// One net per task, trained from the task's own init stream. The main net
/// stays at its initialization and only answers for unknown tasks.
pub(super) fn ind_learn(
    state: &mut EngineState,
    task: TaskId,
    data: &Dataset,
    cfg: &StrategyConfig,
) -> Result<(), EngineError> {
    let seed = state.master_seed;
    let mut s = derive_stream(seed, &labels!["init", "ind", task])?;
    let mut net = nn::init_params(state.registry.main.arch(), &mut s);
    let job = TrainJob {
        primary: Primary::Data { data, spec: LossSpec::ce(1.0) },
        rehearsal: Vec::new(),
        teacher: None,
        penalty: None,
        epochs: cfg.epochs,
        seed,
        ctx: labels!["task", task, "learn"],
    };
    train::run(&mut net, &job, cfg)?;
    state.registry.temp.insert(task, net);
    Ok(())
}

/// Empirical squared-gradient curvature of the cross-entropy loss at the
/// current parameters, averaged over the task's training examples.
fn fisher_anchor(
    params: &nn::NetParams,
    data: &Dataset,
) -> Result<EwcAnchor, EngineError> {
    let n = data.n_train();
    let anchor: Vec<f64> = params.flat().iter().map(|v| *v as f64).collect();
    let mut fisher = vec![0.0f64; anchor.len()];
    let spec = LossSpec::ce(1.0);
    for r in 0..n {
        let x = data.train_x[r * data.d_in..(r + 1) * data.d_in].to_vec();
        let batch =
            Batch::new(x, vec![data.train_y[r]], data.d_in).with_mask(data.mask.clone());
        let g = nn::grad(params, &batch, &spec)?;
        for (slot, v) in fisher.iter_mut().zip(g.flat()) {
            *slot += v * v;
        }
    }
    for v in &mut fisher {
        *v /= n as f64;
    }
    Ok(EwcAnchor { params: anchor, fisher })
}

/// Fine-tuning with quadratic penalties around each retained task's anchor.
/// After training, the new task's own anchor and curvature are stored.
pub(super) fn ewc_learn(
    state: &mut EngineState,
    task: TaskId,
    data: &Dataset,
    cfg: &StrategyConfig,
) -> Result<(), EngineError> {
    if !matches!(state.aux, StrategyAux::Ewc { .. }) {
        state.aux = StrategyAux::Ewc { anchors: Default::default() };
    }
    let StrategyAux::Ewc { anchors } = &state.aux else { unreachable!() };
    let job = TrainJob {
        primary: Primary::Data { data, spec: LossSpec::ce(1.0) },
        rehearsal: Vec::new(),
        teacher: None,
        penalty: Some(EwcPenalty { lambda: cfg.ewc_lambda, anchors }),
        epochs: cfg.epochs,
        seed: state.master_seed,
        ctx: labels!["task", task, "learn"],
    };
    train::run(&mut state.registry.main, &job, cfg)?;
    drop(job);
    let anchor = fisher_anchor(&state.registry.main, data)?;
    let StrategyAux::Ewc { anchors } = &mut state.aux else { unreachable!() };
    anchors.insert(task, anchor);
    Ok(())
}

/// Fine-tuning with distillation against a snapshot of the main net taken
/// before the task, skipped for the very first task.
pub(super) fn lwf_learn(
    state: &mut EngineState,
    task: TaskId,
    data: &Dataset,
    cfg: &StrategyConfig,
) -> Result<(), EngineError> {
    let teacher = (!state.status.is_empty()).then(|| state.registry.main.clone());
    let spec = match &teacher {
        Some(_) => LossSpec {
            weight_ce: 1.0,
            weight_mse: 0.0,
            weight_distill: cfg.lwf_weight,
            temperature: cfg.lwf_temperature,
        },
        None => LossSpec::ce(1.0),
    };
    let job = TrainJob {
        primary: Primary::Data { data, spec },
        rehearsal: Vec::new(),
        teacher: teacher.as_ref(),
        penalty: None,
        epochs: cfg.epochs,
        seed: state.master_seed,
        ctx: labels!["task", task, "learn"],
    };
    train::run(&mut state.registry.main, &job, cfg)
}

fn replay_spec(cfg: &StrategyConfig, with_logits: bool) -> LossSpec {
    if with_logits {
        LossSpec {
            weight_ce: cfg.alpha1,
            weight_mse: cfg.alpha2,
            weight_distill: 0.0,
            temperature: 1.0,
        }
    } else {
        LossSpec::ce(1.0)
    }
}

/// Replay training: cross-entropy on the new task weighted by beta, plus a
/// full pass over every stored memory weighted by one minus beta, through
/// labels alone or labels and stored logits.
pub(super) fn replay_learn(
    state: &mut EngineState,
    task: TaskId,
    data: &Dataset,
    cfg: &StrategyConfig,
    with_logits: bool,
) -> Result<(), EngineError> {
    let seed = state.master_seed;
    let registry = &mut state.registry;
    let spec = replay_spec(cfg, with_logits);
    let coef = 1.0 - cfg.beta;
    let rehearsal: Vec<RehearsalTerm<'_>> = registry
        .memories
        .values()
        .map(|mem| RehearsalTerm { mem, coef, spec })
        .collect();
    let job = TrainJob {
        primary: Primary::Data { data, spec: LossSpec::ce(cfg.beta) },
        rehearsal,
        teacher: None,
        penalty: None,
        epochs: cfg.epochs,
        seed,
        ctx: labels!["task", task, "learn"],
    };
    train::run(&mut registry.main, &job, cfg)?;
    drop(job);
    let mut ms = derive_stream(seed, &labels!["task", task, "mem"])?;
    let mem = protocol::build_memory(&registry.main, data, cfg.memory_size, &mut ms)?;
    registry.memories.insert(task, mem);
    Ok(())
}

/// Replay-style forgetting: drop the task's memory, then run the usual
/// number of epochs of rehearsal-only updates over whatever memories
/// remain, stepping once per minibatch the pool would fill.
pub(super) fn replay_forget(
    state: &mut EngineState,
    task: TaskId,
    cfg: &StrategyConfig,
    with_logits: bool,
) -> Result<(), EngineError> {
    let registry = &mut state.registry;
    registry.memories.remove(&task);
    let spec = replay_spec(cfg, with_logits);
    let coef = 1.0 - cfg.beta;
    let rehearsal: Vec<RehearsalTerm<'_>> = registry
        .memories
        .values()
        .map(|mem| RehearsalTerm { mem, coef, spec })
        .collect();
    let job = TrainJob {
        primary: Primary::Pool,
        rehearsal,
        teacher: None,
        penalty: None,
        epochs: cfg.epochs,
        seed: state.master_seed,
        ctx: labels!["task", task, "forget"],
    };
    train::run(&mut registry.main, &job, cfg)
}
