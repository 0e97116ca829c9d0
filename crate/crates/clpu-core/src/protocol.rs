//! The CLPU request protocol: instructions, the task-status dictionary,
//! episodic memories, the model registry, and request dispatch.
//!
//! A run is a fold of `process_request` over a request list. The engine
//! state holds everything the agent owns; measurement data (accuracy rows,
//! audit snapshots) goes to a [`RunObserver`] on the harness side, so that
//! forgetting a task leaves no agent-side record keyed by it.

use crate::data::Dataset;
use crate::labels;
use crate::metrics::{self, AccuracyMatrix};
use crate::nn::{self, Arch, NetParams, NnError};
use crate::rng::{derive_stream, RandStream};
use crate::strategies::{self, StrategyAux, StrategyConfig, StrategyKind};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

pub type TaskId = usize;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("forget of unlearned task {0}")]
    ForgetUnlearned(TaskId),
    #[error("cannot privately forget a permanent task {0}")]
    ForgetPermanent(TaskId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("memory size {b} exceeds dataset size {n}")]
    MemoryExceedsDataset { b: usize, n: usize },
    #[error("task {0} has no stored memory")]
    MissingMemory(TaskId),
    #[error("request for task {0} must carry a dataset")]
    DatasetRequired(TaskId),
    #[error("request for task {task} must not carry a dataset: {reason}")]
    DatasetForbidden { task: TaskId, reason: &'static str },
    #[error("task {0} is already learned temporarily; repeated T requests are not supported")]
    RelearnTemporary(TaskId),
    #[error("task {0} is permanent and cannot be relearned temporarily")]
    DemotePermanent(TaskId),
    #[error("dataset reference D{d} outside the benchmark's {k} tasks")]
    BadDataRef { d: usize, k: usize },
    #[error("dataset reference D{d} does not match task {task}")]
    DataRefMismatch { task: TaskId, d: usize },
    #[error("sequence line {line}: {msg}")]
    SequenceParse { line: usize, msg: String },
    #[error("request {at} invalid: {source}")]
    InvalidSequence {
        at: usize,
        #[source]
        source: Box<EngineError>,
    },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("request {0} is not a forget request")]
    NotAForget(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Rng(#[from] crate::rng::RngError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

// ── instructions and requests ─────────────────────────────────────────────

/// The three-way learning instruction attached to every request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Instruction {
    /// Learn the task and keep it permanently.
    R,
    /// Learn the task temporarily; it may be forgotten later.
    T,
    /// Forget the task with exact unlearning.
    F,
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Instruction::R => "R",
            Instruction::T => "T",
            Instruction::F => "F",
        })
    }
}

impl std::str::FromStr for Instruction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "R" => Ok(Instruction::R),
            "T" => Ok(Instruction::T),
            "F" => Ok(Instruction::F),
            other => Err(format!("instruction must be R, T, or F, got {other:?}")),
        }
    }
}

/// One user request: a task id, an optional dataset reference (1-based,
/// `D<k>` pointing at benchmark task k), and an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Request {
    pub task: TaskId,
    pub data: Option<usize>,
    pub instruction: Instruction,
}

impl Request {
    pub fn new(task: TaskId, data: Option<usize>, instruction: Instruction) -> Self {
        Request { task, data, instruction }
    }
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.data {
            Some(d) => write!(f, "{} {} D{}", self.task, self.instruction, d),
            None => write!(f, "{} {} -", self.task, self.instruction),
        }
    }
}

// ── task status dictionary ────────────────────────────────────────────────

/// Status record for one retained task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskEntry {
    /// R or T; an F entry never exists because F removes the key.
    pub instruction: Instruction,
    /// Request index (1-based) at which the task was first learned.
    pub first_learned_at: usize,
}

/// The dictionary Ψ of retained tasks. Iteration order is sorted by task id
/// so every consumer walks it deterministically.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskStatusMap {
    entries: BTreeMap<TaskId, TaskEntry>,
}

impl TaskStatusMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, task: TaskId) -> Option<&TaskEntry> {
        self.entries.get(&task)
    }

    pub fn contains(&self, task: TaskId) -> bool {
        self.entries.contains_key(&task)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, &TaskEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.entries.keys().copied().collect()
    }

    /// Applies one request: R/T upsert (keeping `first_learned_at` for a
    /// known task), F removal. F is only legal for a task currently held
    /// with status T.
    pub fn update_status(&mut self, req: &Request, t: usize) -> Result<(), EngineError> {
        match req.instruction {
            Instruction::R | Instruction::T => {
                self.entries
                    .entry(req.task)
                    .and_modify(|e| e.instruction = req.instruction)
                    .or_insert(TaskEntry { instruction: req.instruction, first_learned_at: t });
                Ok(())
            }
            Instruction::F => match self.entries.get(&req.task) {
                None => Err(EngineError::ForgetUnlearned(req.task)),
                Some(e) if e.instruction == Instruction::R => {
                    Err(EngineError::ForgetPermanent(req.task))
                }
                Some(_) => {
                    self.entries.remove(&req.task);
                    Ok(())
                }
            },
        }
    }
}

// ── episodic memory ───────────────────────────────────────────────────────

/// A fixed sample of one task's training data with the logits the serving
/// net produced at storage time. Rows are stored in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub h: Vec<f32>,
    pub d_in: usize,
    pub n_classes: usize,
    pub mask: Vec<usize>,
}

impl EpisodicMemory {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// The memory as one full batch, mask and stored logits included.
    pub fn as_batch(&self) -> nn::Batch {
        nn::Batch::new(self.x.clone(), self.y.clone(), self.d_in)
            .with_logits(self.h.clone())
            .with_mask(self.mask.clone())
    }
}

/// Samples `b` training rows without replacement and stores them with the
/// logits `params` currently assigns them.
pub fn build_memory(
    params: &NetParams,
    data: &Dataset,
    b: usize,
    stream: &mut RandStream,
) -> Result<EpisodicMemory, EngineError> {
    let n = data.n_train();
    if b > n {
        return Err(EngineError::MemoryExceedsDataset { b, n });
    }
    let idx = stream.sample_k(n, b)?;
    let (x, y) = data.gather_train(&idx);
    let h = nn::forward(params, &x, b)?;
    Ok(EpisodicMemory {
        x,
        y,
        h,
        d_in: data.d_in,
        n_classes: params.arch().n_classes(),
        mask: data.mask.clone(),
    })
}

// ── model registry and engine state ───────────────────────────────────────

/// The models and memories the agent owns: one main net, temporary nets
/// keyed by task, episodic memories keyed by task.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRegistry {
    pub main: NetParams,
    pub temp: BTreeMap<TaskId, NetParams>,
    pub memories: BTreeMap<TaskId, EpisodicMemory>,
}

impl ModelRegistry {
    pub fn new(main: NetParams) -> Self {
        ModelRegistry { main, temp: BTreeMap::new(), memories: BTreeMap::new() }
    }
}

/// Everything the agent carries between requests. Measurement artifacts
/// live in [`RunObserver`] instead, so this struct is exactly the surface
/// the privacy bookkeeping invariant quantifies over.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub master_seed: u64,
    pub strategy: StrategyKind,
    pub status: TaskStatusMap,
    pub registry: ModelRegistry,
    pub aux: StrategyAux,
    /// Requests processed so far.
    pub t: usize,
}

impl EngineState {
    /// Fresh state with the main model drawn from the seed's init stream.
    pub fn new(master_seed: u64, arch: &Arch, strategy: StrategyKind) -> Result<Self, EngineError> {
        let mut s = derive_stream(master_seed, &labels!["init", "main"])?;
        Ok(EngineState {
            master_seed,
            strategy,
            status: TaskStatusMap::new(),
            registry: ModelRegistry::new(nn::init_params(arch, &mut s)),
            aux: StrategyAux::None,
            t: 0,
        })
    }

    /// Serving model for a retained task: its temporary net if one exists,
    /// else the main model. Unknown tasks are an error.
    pub fn route_model(&self, task: TaskId) -> Result<&NetParams, EngineError> {
        if !self.status.contains(task) {
            return Err(EngineError::UnknownTask(task));
        }
        Ok(self.serving_model(task))
    }

    /// The net that answers queries about `task`, with no status check.
    /// This is what an outside observer reaches after a task was forgotten.
    pub fn serving_model(&self, task: TaskId) -> &NetParams {
        self.registry.temp.get(&task).unwrap_or(&self.registry.main)
    }

    /// Names every state component keyed by the given task. Empty output
    /// after an F request is the bookkeeping half of private unlearning.
    pub fn records_keyed_by(&self, task: TaskId) -> Vec<String> {
        let mut found = Vec::new();
        if self.status.contains(task) {
            found.push(format!("status[{task}]"));
        }
        if self.registry.temp.contains_key(&task) {
            found.push(format!("temp[{task}]"));
        }
        if self.registry.memories.contains_key(&task) {
            found.push(format!("memory[{task}]"));
        }
        if let StrategyAux::Ewc { anchors } = &self.aux {
            if anchors.contains_key(&task) {
                found.push(format!("ewc[{task}]"));
            }
        }
        found
    }

    /// Mean cross-entropy of a task's serving model on its own memory.
    fn memory_loss(&self, task: TaskId) -> Result<Option<f64>, EngineError> {
        let Some(mem) = self.registry.memories.get(&task) else {
            return Ok(None);
        };
        let model = self.serving_model(task);
        let logits = nn::forward(model, &mem.x, mem.len())?;
        let loss = nn::loss_ce(&logits, mem.n_classes, &mem.y, Some(&mem.mask))?;
        Ok(Some(loss))
    }
}

// ── run observation ───────────────────────────────────────────────────────

/// A non-forgetting guarantee violation: a retained task's memory loss grew
/// by more than the slack across one request.
#[derive(Debug, Clone, PartialEq)]
pub struct Eq8Event {
    pub request_index: usize,
    pub task: TaskId,
    pub before: f64,
    pub after: f64,
}

/// Serving-model outputs captured at a forget request, the raw material of
/// the privacy audit: masked softmax rows over the forgotten task's test set.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgetSnapshot {
    pub request_index: usize,
    pub task: TaskId,
    pub probs: Vec<Vec<f64>>,
}

/// Harness-side measurements accumulated over one run. Kept apart from
/// [`EngineState`] so agent state stays free of forgotten-task records.
#[derive(Debug, Clone)]
pub struct RunObserver {
    pub accuracy: AccuracyMatrix,
    pub eq8_slack: f64,
    pub eq8_violations: Vec<Eq8Event>,
    pub forget_snapshots: Vec<ForgetSnapshot>,
}

impl RunObserver {
    pub fn new(eq8_slack: f64) -> Self {
        RunObserver {
            accuracy: AccuracyMatrix::new(),
            eq8_slack,
            eq8_violations: Vec::new(),
            forget_snapshots: Vec::new(),
        }
    }
}

/// Masked softmax outputs of one net over a task's test set.
pub fn output_distributions(params: &NetParams, data: &Dataset) -> Result<Vec<Vec<f64>>, EngineError> {
    let classes = params.arch().n_classes();
    let logits = nn::forward(params, &data.test_x, data.n_test())?;
    Ok((0..data.n_test())
        .map(|r| nn::softmax_probs(&logits[r * classes..(r + 1) * classes], Some(&data.mask)))
        .collect())
}

// ── request processing ────────────────────────────────────────────────────

fn resolve_dataset<'a>(
    req: &Request,
    datasets: &'a [Dataset],
    status: &TaskStatusMap,
) -> Result<Option<&'a Dataset>, EngineError> {
    let known = status.contains(req.task);
    match (req.instruction, known, req.data) {
        (Instruction::F, _, Some(_)) => {
            Err(EngineError::DatasetForbidden { task: req.task, reason: "forget requests carry none" })
        }
        (Instruction::F, _, None) => Ok(None),
        (Instruction::R | Instruction::T, true, Some(_)) => Err(EngineError::DatasetForbidden {
            task: req.task,
            reason: "the task was provided once already",
        }),
        (Instruction::R | Instruction::T, true, None) => Ok(None),
        (Instruction::R | Instruction::T, false, None) => Err(EngineError::DatasetRequired(req.task)),
        (Instruction::R | Instruction::T, false, Some(d)) => {
            if d == 0 || d > datasets.len() {
                return Err(EngineError::BadDataRef { d, k: datasets.len() });
            }
            if d != req.task {
                return Err(EngineError::DataRefMismatch { task: req.task, d });
            }
            Ok(Some(&datasets[d - 1]))
        }
    }
}

/// Advances the engine by one request: validates it, dispatches to the
/// strategy, updates the status dictionary, and (when an observer is given)
/// records the accuracy row over all retained tasks, the non-forgetting
/// check, and forget-time output snapshots.
pub fn process_request(
    state: &mut EngineState,
    req: &Request,
    datasets: &[Dataset],
    cfg: &StrategyConfig,
    mut observer: Option<&mut RunObserver>,
) -> Result<(), EngineError> {
    let t = state.t + 1;
    let dataset = resolve_dataset(req, datasets, &state.status)?;

    // Guard the status transitions that have no defined learning behavior.
    if req.instruction == Instruction::T {
        match state.status.get(req.task).map(|e| e.instruction) {
            Some(Instruction::T) => return Err(EngineError::RelearnTemporary(req.task)),
            Some(Instruction::R) => return Err(EngineError::DemotePermanent(req.task)),
            _ => {}
        }
    }

    let eq8_before: Vec<(TaskId, f64)> = if observer.is_some() && req.instruction != Instruction::F
    {
        let mut v = Vec::new();
        for task in state.registry.memories.keys().copied().collect::<Vec<_>>() {
            if let Some(loss) = state.memory_loss(task)? {
                v.push((task, loss));
            }
        }
        v
    } else {
        Vec::new()
    };

    strategies::apply_request(state, req, dataset, t, cfg)?;
    state.status.update_status(req, t)?;
    state.t = t;

    if let Some(obs) = observer.as_deref_mut() {
        for (task, before) in eq8_before {
            if let Some(after) = state.memory_loss(task)? {
                if after > before + obs.eq8_slack {
                    obs.eq8_violations.push(Eq8Event { request_index: t, task, before, after });
                }
            }
        }
        if req.instruction == Instruction::F {
            let data = &datasets[req.task - 1];
            let probs = output_distributions(state.serving_model(req.task), data)?;
            obs.forget_snapshots.push(ForgetSnapshot { request_index: t, task: req.task, probs });
        }
        for (task, _) in state.status.iter() {
            let model = state.route_model(task)?;
            let data = &datasets[task - 1];
            let acc = metrics::eval_accuracy(model, data)?;
            obs.accuracy.record(t, task, acc);
        }
        for (task, entry) in state.status.iter() {
            obs.accuracy.note_first_learned(task, entry.first_learned_at);
        }
    }
    Ok(())
}

/// Folds `process_request` over a whole sequence.
pub fn run_sequence(
    state: &mut EngineState,
    requests: &[Request],
    datasets: &[Dataset],
    cfg: &StrategyConfig,
    mut observer: Option<&mut RunObserver>,
) -> Result<(), EngineError> {
    for req in requests {
        process_request(state, req, datasets, cfg, observer.as_deref_mut())?;
    }
    Ok(())
}

// ── sequences: text form, presets, retain subsequence ─────────────────────

/// Renders one request per line: `task instruction dataset-ref`, with `-`
/// for an absent dataset.
pub fn format_sequence(requests: &[Request]) -> String {
    let mut out = String::new();
    for req in requests {
        out.push_str(&req.to_string());
        out.push('\n');
    }
    out
}

/// Parses the line format of [`format_sequence`]. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_sequence(text: &str) -> Result<Vec<Request>, EngineError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| EngineError::SequenceParse { line: i + 1, msg };
        let mut parts = line.split_whitespace();
        let task: TaskId = parts
            .next()
            .ok_or_else(|| err("missing task id".into()))?
            .parse()
            .map_err(|e| err(format!("task id: {e}")))?;
        if task == 0 {
            return Err(err("task ids are 1-based".into()));
        }
        let instruction: Instruction = parts
            .next()
            .ok_or_else(|| err("missing instruction".into()))?
            .parse()
            .map_err(err)?;
        let data = match parts.next().ok_or_else(|| err("missing dataset field".into()))? {
            "-" => None,
            d => {
                let num = d
                    .strip_prefix('D')
                    .ok_or_else(|| err(format!("dataset field must be D<k> or -, got {d:?}")))?;
                Some(num.parse::<usize>().map_err(|e| err(format!("dataset ref: {e}")))?)
            }
        };
        if parts.next().is_some() {
            return Err(err("trailing fields".into()));
        }
        out.push(Request { task, data, instruction });
    }
    Ok(out)
}

/// Checks a sequence against the protocol rules by simulating the status
/// dictionary: dataset presence per request kind, F only on a task
/// currently held with status T, no repeated or demoting T requests.
pub fn validate_sequence(requests: &[Request], n_datasets: usize) -> Result<(), EngineError> {
    let mut status = TaskStatusMap::new();
    for (i, req) in requests.iter().enumerate() {
        let at = i + 1;
        let wrap = |source: EngineError| EngineError::InvalidSequence { at, source: Box::new(source) };
        let known = status.contains(req.task);
        match (req.instruction, known, req.data) {
            (Instruction::F, _, Some(_)) => {
                return Err(wrap(EngineError::DatasetForbidden {
                    task: req.task,
                    reason: "forget requests carry none",
                }))
            }
            (Instruction::R | Instruction::T, true, Some(_)) => {
                return Err(wrap(EngineError::DatasetForbidden {
                    task: req.task,
                    reason: "the task was provided once already",
                }))
            }
            (Instruction::R | Instruction::T, false, None) => {
                return Err(wrap(EngineError::DatasetRequired(req.task)))
            }
            (Instruction::R | Instruction::T, false, Some(d)) if d == 0 || d > n_datasets => {
                return Err(wrap(EngineError::BadDataRef { d, k: n_datasets }))
            }
            (Instruction::R | Instruction::T, false, Some(d)) if d != req.task => {
                return Err(wrap(EngineError::DataRefMismatch { task: req.task, d }))
            }
            _ => {}
        }
        if req.instruction == Instruction::T {
            match status.get(req.task).map(|e| e.instruction) {
                Some(Instruction::T) => return Err(wrap(EngineError::RelearnTemporary(req.task))),
                Some(Instruction::R) => return Err(wrap(EngineError::DemotePermanent(req.task))),
                _ => {}
            }
        }
        status.update_status(req, at).map_err(wrap)?;
    }
    Ok(())
}

/// The named request sequences: `clpu-8`, the eight-request mix of
/// permanent, temporary, and forget instructions over five tasks, and
/// `retain-4`, its unlearning-free counterpart.
pub fn preset_sequence(name: &str) -> Result<Vec<Request>, EngineError> {
    use Instruction::*;
    let mk = |task, data, instruction| Request { task, data, instruction };
    match name {
        "clpu-8" => Ok(vec![
            mk(1, Some(1), R),
            mk(2, Some(2), T),
            mk(3, Some(3), T),
            mk(4, Some(4), R),
            mk(1, None, R),
            mk(2, None, F),
            mk(5, Some(5), T),
            mk(5, None, F),
        ]),
        "retain-4" => Ok(vec![mk(1, Some(1), R), mk(3, Some(3), T), mk(4, Some(4), R), mk(1, None, R)]),
        other => Err(EngineError::UnknownPreset(other.to_owned())),
    }
}

/// The retain counterpart of a forget request: every earlier request whose
/// task survives in Ψ after request `t` (1-based), in original order.
pub fn retain_subsequence(requests: &[Request], t: usize) -> Result<Vec<Request>, EngineError> {
    if t == 0 || t > requests.len() || requests[t - 1].instruction != Instruction::F {
        return Err(EngineError::NotAForget(t));
    }
    let mut status = TaskStatusMap::new();
    for (i, req) in requests[..t].iter().enumerate() {
        status.update_status(req, i + 1)?;
    }
    Ok(requests[..t - 1]
        .iter()
        .filter(|req| status.contains(req.task))
        .copied()
        .collect())
}
