//! The isolating strategy. Permanent tasks train the main net with dark
//! rehearsal over stored memories; temporary tasks train a private copy so
//! the main net's trajectory never depends on them; promotion replays the
//! task's own memory into the main net; forgetting deletes the private
//! copy and the memory and touches nothing else.

use crate::data::Dataset;
use crate::labels;
use crate::nn::{self, LossSpec};
use crate::protocol::{self, EngineError, EngineState, Instruction, TaskId};
use crate::rng::derive_stream;
use crate::strategies::train::{self, Primary, RehearsalTerm, TrainJob};
use crate::strategies::{RehearsalScope, StrategyConfig, TempInit};

/// Tasks whose memories the main net rehearses, from the pre-update status
/// dictionary. `exclude` drops the task currently being merged.
fn scope_tasks(state: &EngineState, exclude: TaskId, scope: RehearsalScope) -> Vec<TaskId> {
    state
        .status
        .iter()
        .filter(|(id, entry)| {
            *id != exclude
                && state.registry.memories.contains_key(id)
                && match scope {
                    RehearsalScope::PermanentOnly => entry.instruction == Instruction::R,
                    RehearsalScope::AllTasks => true,
                }
        })
        .map(|(id, _)| id)
        .collect()
}

/// New task: permanent requests train the main net in place, temporary
/// requests train a separate net that starts from the main net or from the
/// task's own init stream. Either way the objective is cross-entropy on
/// the new data plus the scope's logit-replay terms, and a fresh memory is
/// sampled from the trained net afterwards.
pub(super) fn learn(
    state: &mut EngineState,
    task: TaskId,
    data: &Dataset,
    instruction: Instruction,
    cfg: &StrategyConfig,
) -> Result<(), EngineError> {
    let scope = scope_tasks(state, task, cfg.rehearsal_scope);
    let coef = if scope.is_empty() { 0.0 } else { 1.0 / scope.len() as f64 };
    let seed = state.master_seed;
    let registry = &mut state.registry;

    let rehearsal: Vec<RehearsalTerm<'_>> = scope
        .iter()
        .map(|id| RehearsalTerm { mem: &registry.memories[id], coef, spec: LossSpec::mse(1.0) })
        .collect();
    let job = TrainJob {
        primary: Primary::Data { data, spec: LossSpec::ce(1.0) },
        rehearsal,
        teacher: None,
        penalty: None,
        epochs: cfg.epochs,
        seed,
        ctx: labels!["task", task, "learn"],
    };

    match instruction {
        Instruction::R => {
            train::run(&mut registry.main, &job, cfg)?;
            drop(job);
            let mut ms = derive_stream(seed, &labels!["task", task, "mem"])?;
            let mem = protocol::build_memory(&registry.main, data, cfg.memory_size, &mut ms)?;
            registry.memories.insert(task, mem);
        }
        Instruction::T => {
            let mut net = match cfg.temp_init {
                TempInit::FromMain => registry.main.clone(),
                TempInit::Scratch => {
                    let mut s = derive_stream(seed, &labels!["init", "temp", task])?;
                    nn::init_params(registry.main.arch(), &mut s)
                }
            };
            train::run(&mut net, &job, cfg)?;
            drop(job);
            let mut ms = derive_stream(seed, &labels!["task", task, "mem"])?;
            let mem = protocol::build_memory(&net, data, cfg.memory_size, &mut ms)?;
            registry.memories.insert(task, mem);
            registry.temp.insert(task, net);
        }
        Instruction::F => unreachable!("forget requests never reach learn"),
    }
    Ok(())
}

/// Promotion of a temporary task: the main net trains on the task's stored
/// memory through the logit-replay loss, minibatched like a dataset, with
/// the usual rehearsal terms over the rest of the scope. The private net
/// is dropped afterwards; the memory stays.
pub(super) fn promote(
    state: &mut EngineState,
    task: TaskId,
    cfg: &StrategyConfig,
) -> Result<(), EngineError> {
    let scope = scope_tasks(state, task, cfg.rehearsal_scope);
    let coef = if scope.is_empty() { 0.0 } else { 1.0 / scope.len() as f64 };
    let seed = state.master_seed;
    let registry = &mut state.registry;
    if !registry.memories.contains_key(&task) {
        return Err(EngineError::MissingMemory(task));
    }

    let rehearsal: Vec<RehearsalTerm<'_>> = scope
        .iter()
        .map(|id| RehearsalTerm { mem: &registry.memories[id], coef, spec: LossSpec::mse(1.0) })
        .collect();
    let job = TrainJob {
        primary: Primary::Memory { mem: &registry.memories[&task], spec: LossSpec::mse(1.0) },
        rehearsal,
        teacher: None,
        penalty: None,
        epochs: cfg.epochs,
        seed,
        ctx: labels!["task", task, "merge"],
    };
    train::run(&mut registry.main, &job, cfg)?;
    drop(job);
    registry.temp.remove(&task);
    Ok(())
}

#[cfg(test)]
mod tests {
    use crate::data::{gen_blob_base, Dataset};
    use crate::labels;
    use crate::nn::Arch;
    use crate::protocol::{process_request, EngineState, Instruction, Request};
    use crate::rng::derive_stream;
    use crate::strategies::{StrategyConfig, StrategyKind, TempInit};

    fn fixture() -> (Vec<Dataset>, StrategyConfig, Arch) {
        let mut datasets = Vec::new();
        for k in 0..3 {
            let mut s = derive_stream(11, &labels!["fixture", k as i64]).unwrap();
            datasets.push(gen_blob_base(2, 4, 20, 10, 0.3, &mut s).unwrap());
        }
        let mut cfg = StrategyConfig::default();
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.memory_size = 8;
        let arch = Arch::new(vec![4, 8, 2]).unwrap();
        (datasets, cfg, arch)
    }

    fn req(task: usize, data: Option<usize>, i: Instruction) -> Request {
        Request::new(task, data, i)
    }

    #[test]
    fn temporary_tasks_never_touch_the_main_net() {
        let (data, cfg, arch) = fixture();
        let mut state = EngineState::new(7, &arch, StrategyKind::ClpuDerPp).unwrap();

        process_request(&mut state, &req(1, Some(1), Instruction::R), &data, &cfg, None).unwrap();
        let after_permanent = state.registry.main.clone();

        process_request(&mut state, &req(2, Some(2), Instruction::T), &data, &cfg, None).unwrap();
        assert!(state.registry.main.bits_eq(&after_permanent));
        assert!(state.registry.temp.contains_key(&2));
        assert_eq!(state.registry.memories.len(), 2);
        assert!(!state.registry.temp[&2].bits_eq(&after_permanent));
    }

    #[test]
    fn forgetting_removes_the_blobs_and_leaves_main_bitwise_intact() {
        let (data, cfg, arch) = fixture();
        let mut state = EngineState::new(7, &arch, StrategyKind::ClpuDerPp).unwrap();
        process_request(&mut state, &req(1, Some(1), Instruction::R), &data, &cfg, None).unwrap();
        process_request(&mut state, &req(2, Some(2), Instruction::T), &data, &cfg, None).unwrap();
        let before = state.registry.main.clone();

        process_request(&mut state, &req(2, None, Instruction::F), &data, &cfg, None).unwrap();
        assert!(state.registry.main.bits_eq(&before));
        assert!(state.records_keyed_by(2).is_empty());
        assert!(state.registry.memories.contains_key(&1));
    }

    #[test]
    fn untrained_temp_net_matches_its_init_choice() {
        let (data, mut cfg, arch) = fixture();
        cfg.epochs = 0;

        let mut state = EngineState::new(9, &arch, StrategyKind::ClpuDerPp).unwrap();
        process_request(&mut state, &req(1, Some(1), Instruction::T), &data, &cfg, None).unwrap();
        assert!(state.registry.temp[&1].bits_eq(&state.registry.main));

        cfg.temp_init = TempInit::Scratch;
        let mut state = EngineState::new(9, &arch, StrategyKind::ClpuDerPp).unwrap();
        process_request(&mut state, &req(1, Some(1), Instruction::T), &data, &cfg, None).unwrap();
        let mut s = derive_stream(9, &labels!["init", "temp", 1]).unwrap();
        let fresh = crate::nn::init_params(&arch, &mut s);
        assert!(state.registry.temp[&1].bits_eq(&fresh));
        assert!(!state.registry.temp[&1].bits_eq(&state.registry.main));
    }

    #[test]
    fn promotion_merges_and_drops_the_private_net() {
        let (data, cfg, arch) = fixture();
        let mut state = EngineState::new(5, &arch, StrategyKind::ClpuDerPp).unwrap();
        process_request(&mut state, &req(1, Some(1), Instruction::T), &data, &cfg, None).unwrap();
        let before = state.registry.main.clone();

        process_request(&mut state, &req(1, None, Instruction::R), &data, &cfg, None).unwrap();
        assert!(!state.registry.main.bits_eq(&before));
        assert!(state.registry.temp.is_empty());
        assert!(state.registry.memories.contains_key(&1));
        assert_eq!(state.status.get(1).unwrap().instruction, Instruction::R);
        assert_eq!(state.status.get(1).unwrap().first_learned_at, 1);
    }

    #[test]
    fn repeated_permanent_request_is_a_parameter_noop() {
        let (data, cfg, arch) = fixture();
        let mut state = EngineState::new(5, &arch, StrategyKind::ClpuDerPp).unwrap();
        process_request(&mut state, &req(1, Some(1), Instruction::R), &data, &cfg, None).unwrap();
        let before = state.registry.main.clone();
        process_request(&mut state, &req(1, None, Instruction::R), &data, &cfg, None).unwrap();
        assert!(state.registry.main.bits_eq(&before));
        assert_eq!(state.t, 2);
    }
}
