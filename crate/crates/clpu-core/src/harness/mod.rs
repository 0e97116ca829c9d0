//! Experiment orchestration: builds the benchmark, runs the request
//! sequence once per seed, pairs every forget request with retrained
//! counterfactual runs on the same seeds, computes the audit, and writes
//! reports and checkpoints.

pub mod checkpoint;
pub mod report;

use crate::data::{Benchmark, BenchmarkFamily, BenchmarkSpec, DataError};
use crate::metrics::{self, AccuracyMatrix, AuditEvent, AuditGroups, MetricsError};
use crate::nn::{Arch, NnError};
use crate::protocol::{
    self, process_request, EngineError, EngineState, Instruction, Request, RunObserver, TaskId,
};
use crate::strategies::{StrategyConfig, StrategyKind};
use checkpoint::CheckpointError;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("run diverged: strategy {strategy}, seed {seed}, {phase} run, request {request}")]
    Diverged { strategy: StrategyKind, seed: u64, phase: &'static str, request: usize },
    #[error(transparent)]
    Engine(EngineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<EngineError> for HarnessError {
    fn from(e: EngineError) -> Self {
        HarnessError::Engine(e)
    }
}

fn run_error(
    e: EngineError,
    strategy: StrategyKind,
    seed: u64,
    phase: &'static str,
    request: usize,
) -> HarnessError {
    match e {
        EngineError::Nn(NnError::Diverged) => {
            HarnessError::Diverged { strategy, seed, phase, request }
        }
        other => HarnessError::Engine(other),
    }
}

// ── configuration ─────────────────────────────────────────────────────────

/// Which request sequence to run: a named preset or explicit lines in the
/// `task instruction dataset` format. Exactly one must be set.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<Vec<String>>,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec::preset("clpu-8")
    }
}

impl SequenceSpec {
    pub fn preset(name: &str) -> Self {
        SequenceSpec { preset: Some(name.to_owned()), custom: None }
    }

    pub fn custom(lines: &[&str]) -> Self {
        SequenceSpec { preset: None, custom: Some(lines.iter().map(|s| s.to_string()).collect()) }
    }

    pub fn resolve(&self) -> Result<Vec<Request>, HarnessError> {
        match (&self.preset, &self.custom) {
            (Some(name), None) => Ok(protocol::preset_sequence(name)?),
            (None, Some(lines)) => Ok(protocol::parse_sequence(&lines.join("\n"))?),
            _ => Err(HarnessError::Config(
                "sequence needs exactly one of `preset` or `custom`".into(),
            )),
        }
    }
}

/// One experiment: a benchmark, a strategy with its hyperparameters, a
/// request sequence, and the seeds to repeat it over.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub strategy: StrategyKind,
    /// Hidden layer widths; the input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub training: StrategyConfig,
    pub seeds: Vec<u64>,
    pub sequence: SequenceSpec,
    /// Allowed rise in a retained memory's loss before the non-forgetting
    /// monitor records a violation.
    pub eq8_slack: f64,
    /// Where report files and checkpoints go; `None` keeps everything in
    /// memory.
    pub output_dir: Option<PathBuf>,
    pub write_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            benchmark: BenchmarkSpec::desk(BenchmarkFamily::PermBlobs, 0),
            strategy: StrategyKind::ClpuDerPp,
            hidden: vec![100, 100],
            training: StrategyConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            sequence: SequenceSpec::default(),
            eq8_slack: 0.05,
            output_dir: None,
            write_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    /// Checks everything checkable without running, and returns the
    /// resolved request sequence.
    pub fn validate(&self) -> Result<Vec<Request>, HarnessError> {
        self.training.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        let distinct: std::collections::BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(HarnessError::Config("hidden layer widths must be positive".into()));
        }
        if !(self.eq8_slack >= 0.0 && self.eq8_slack.is_finite()) {
            return Err(HarnessError::Config(format!(
                "eq8_slack must be nonnegative and finite, got {}",
                self.eq8_slack
            )));
        }
        let requests = self.sequence.resolve()?;
        if requests.is_empty() {
            return Err(HarnessError::Config("request sequence is empty".into()));
        }
        protocol::validate_sequence(&requests, self.benchmark.tasks)?;
        Ok(requests)
    }
}

// ── report types ──────────────────────────────────────────────────────────

/// Accuracy on a forgotten task's test set just before and just after its
/// forget request, from the serving model an outside caller would reach.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ForgetRecord {
    pub request_index: usize,
    pub task: TaskId,
    pub acc_before: f64,
    pub acc_after: f64,
}

/// One seed's run summary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub acc: f64,
    pub fm: f64,
    pub eq8_violations: usize,
    pub forgets: Vec<ForgetRecord>,
    #[serde(skip)]
    pub matrix: AccuracyMatrix,
}

/// Where one forget event's counterfactual models came from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AuditEventInfo {
    pub request_index: usize,
    pub task: TaskId,
    pub retain_key: String,
}

/// The aggregated audit: divergence groups over all forget events plus the
/// two summary statistics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AuditReport {
    pub events: Vec<AuditEventInfo>,
    pub ijsd: Vec<f64>,
    pub ajsd: Vec<f64>,
    pub ijsd_mean: f64,
    pub ijsd_sd: f64,
    pub ajsd_mean: f64,
    pub ajsd_sd: f64,
    pub js_ratio: f64,
    pub irr: f64,
}

/// Everything an experiment produces, in memory. The final engine states
/// (one per seed, full run) ride along for callers that compare runs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub arch: Vec<usize>,
    pub per_seed: Vec<SeedOutcome>,
    pub acc_mean: f64,
    pub acc_sd: f64,
    pub fm_mean: f64,
    pub fm_sd: f64,
    pub audit: Option<AuditReport>,
    #[serde(skip)]
    pub final_states: Vec<EngineState>,
}

// ── experiment driver ─────────────────────────────────────────────────────

struct RetainPlan {
    key: String,
    requests: Vec<Request>,
    /// Request indices of the forget events this plan answers for.
    events: Vec<usize>,
}

fn retain_plans(requests: &[Request]) -> Result<Vec<RetainPlan>, HarnessError> {
    let mut plans: Vec<RetainPlan> = Vec::new();
    let mut by_text: BTreeMap<String, usize> = BTreeMap::new();
    for (i, req) in requests.iter().enumerate() {
        if req.instruction != Instruction::F {
            continue;
        }
        let t = i + 1;
        let sub = protocol::retain_subsequence(requests, t)?;
        let text = protocol::format_sequence(&sub);
        let idx = *by_text.entry(text).or_insert_with(|| {
            plans.push(RetainPlan {
                key: format!("sub{}", plans.len()),
                requests: sub,
                events: Vec::new(),
            });
            plans.len() - 1
        });
        plans[idx].events.push(t);
    }
    Ok(plans)
}

fn drive_run(
    cfg: &ExperimentConfig,
    arch: &Arch,
    seed: u64,
    requests: &[Request],
    datasets: &[crate::data::Dataset],
    phase: &'static str,
    mut observer: Option<&mut RunObserver>,
    mut on_forget: impl FnMut(&EngineState, usize) -> Result<(), HarnessError>,
) -> Result<EngineState, HarnessError> {
    let mut state = EngineState::new(seed, arch, cfg.strategy)?;
    for (i, req) in requests.iter().enumerate() {
        process_request(&mut state, req, datasets, &cfg.training, observer.as_deref_mut())
            .map_err(|e| run_error(e, cfg.strategy, seed, phase, i + 1))?;
        if req.instruction == Instruction::F {
            on_forget(&state, i + 1)?;
        }
    }
    Ok(state)
}

/// Runs the full experiment with retain-run caching.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    run_experiment_impl(cfg, true)
}

/// Same results, but retrains one retain run per forget event even when
/// events share a subsequence. Exists to check the cache changes nothing.
pub fn run_experiment_uncached(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    run_experiment_impl(cfg, false)
}

fn run_experiment_impl(cfg: &ExperimentConfig, cache: bool) -> Result<ExperimentReport, HarnessError> {
    let started = SystemTime::now();
    let clock = Instant::now();

    let requests = cfg.validate()?;
    let bench = Benchmark::build(&cfg.benchmark)?;
    let mut dims = vec![bench.tasks[0].d_in];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(bench.tasks[0].n_labels);
    let arch = Arch::new(dims.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;

    let out_dir = cfg.output_dir.as_deref();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let save = |state: &EngineState, name: String| -> Result<(), HarnessError> {
        if let Some(dir) = out_dir {
            if cfg.write_checkpoints {
                checkpoint::save_checkpoint(state, &dir.join(name))?;
            }
        }
        Ok(())
    };

    let plans = retain_plans(&requests)?;
    let auditing = !plans.is_empty() && cfg.seeds.len() >= 2;

    // full runs, one per seed
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut final_states = Vec::with_capacity(cfg.seeds.len());
    // per event request index: per-seed output distributions
    let mut full_outputs: BTreeMap<usize, Vec<Vec<Vec<f64>>>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let mut observer = RunObserver::new(cfg.eq8_slack);
        let state = drive_run(
            cfg,
            &arch,
            seed,
            &requests,
            &bench.tasks,
            "full",
            Some(&mut observer),
            |state, t| save(state, format!("full_seed{seed}_req{t}.clpu")),
        )?;
        save(&state, format!("full_seed{seed}_final.clpu"))?;

        let (acc, fm) = metrics::compute_acc_fm(&observer.accuracy)?;
        let mut forgets = Vec::new();
        for snap in &observer.forget_snapshots {
            let data = &bench.tasks[snap.task - 1];
            let acc_before = observer
                .accuracy
                .get(snap.request_index - 1, snap.task)
                .ok_or(MetricsError::MissingEntry { t: snap.request_index - 1, s: snap.task })?;
            let acc_after = metrics::accuracy_from_distributions(&snap.probs, &data.test_y)?;
            forgets.push(ForgetRecord {
                request_index: snap.request_index,
                task: snap.task,
                acc_before,
                acc_after,
            });
            if auditing {
                full_outputs.entry(snap.request_index).or_default().push(snap.probs.clone());
            }
        }
        per_seed.push(SeedOutcome {
            seed,
            acc,
            fm,
            eq8_violations: observer.eq8_violations.len(),
            forgets,
            matrix: observer.accuracy,
        });
        final_states.push(state);
    }

    // retain runs and the audit
    let mut audit = None;
    if auditing {
        let mut event_infos = Vec::new();
        // per event request index: per-seed outputs of the retain models
        let mut retain_outputs: BTreeMap<usize, Vec<Vec<Vec<f64>>>> = BTreeMap::new();
        for plan in &plans {
            for &seed in &cfg.seeds {
                if cache {
                    let state = drive_run(
                        cfg,
                        &arch,
                        seed,
                        &plan.requests,
                        &bench.tasks,
                        "retain",
                        None,
                        |_, _| Ok(()),
                    )?;
                    save(&state, format!("retain_seed{seed}_{}.clpu", plan.key))?;
                    for &t in &plan.events {
                        let task = requests[t - 1].task;
                        let probs = protocol::output_distributions(
                            state.serving_model(task),
                            &bench.tasks[task - 1],
                        )?;
                        retain_outputs.entry(t).or_default().push(probs);
                    }
                } else {
                    for &t in &plan.events {
                        let state = drive_run(
                            cfg,
                            &arch,
                            seed,
                            &plan.requests,
                            &bench.tasks,
                            "retain",
                            None,
                            |_, _| Ok(()),
                        )?;
                        let task = requests[t - 1].task;
                        let probs = protocol::output_distributions(
                            state.serving_model(task),
                            &bench.tasks[task - 1],
                        )?;
                        retain_outputs.entry(t).or_default().push(probs);
                    }
                }
            }
            for &t in &plan.events {
                event_infos.push(AuditEventInfo {
                    request_index: t,
                    task: requests[t - 1].task,
                    retain_key: plan.key.clone(),
                });
            }
        }
        event_infos.sort_by_key(|e| e.request_index);

        let events: Vec<AuditEvent> = event_infos
            .iter()
            .map(|info| AuditEvent {
                full: full_outputs.remove(&info.request_index).expect("full outputs recorded"),
                retain: retain_outputs.remove(&info.request_index).expect("retain outputs recorded"),
            })
            .collect();
        let groups: AuditGroups = metrics::compute_audit(&events)?;
        let js_ratio = groups.js_ratio()?;
        let irr = groups.irr()?;
        audit = Some(AuditReport {
            events: event_infos,
            ijsd_mean: metrics::mean(&groups.ijsd),
            ijsd_sd: metrics::std_dev(&groups.ijsd),
            ajsd_mean: metrics::mean(&groups.ajsd),
            ajsd_sd: metrics::std_dev(&groups.ajsd),
            js_ratio,
            irr,
            ijsd: groups.ijsd,
            ajsd: groups.ajsd,
        });
    }

    let accs: Vec<f64> = per_seed.iter().map(|s| s.acc).collect();
    let fms: Vec<f64> = per_seed.iter().map(|s| s.fm).collect();
    let report = ExperimentReport {
        config: cfg.clone(),
        arch: dims,
        acc_mean: metrics::mean(&accs),
        acc_sd: metrics::std_dev(&accs),
        fm_mean: metrics::mean(&fms),
        fm_sd: metrics::std_dev(&fms),
        per_seed,
        audit,
        final_states,
    };

    if let Some(dir) = out_dir {
        report::write_report_files(&report, dir)?;
        report::write_metadata(dir, started, clock.elapsed())?;
    }
    Ok(report)
}

/// Unix seconds for metadata stamps.
pub(crate) fn unix_seconds(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
