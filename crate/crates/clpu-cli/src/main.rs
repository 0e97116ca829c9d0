//! Command-line front end for the engine: benchmark generation, full
//! experiment runs, offline audit recomputation from stored checkpoints,
//! and a single-sequence training mode for debugging.
//!
//! Exit codes: 0 success, 1 usage or configuration problems, 2 training
//! divergence, 3 file I/O or data-format problems.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use clpu_core::data::{self, Benchmark, BenchmarkFamily, BenchmarkSpec, IdxPaths};
use clpu_core::harness::checkpoint::load_checkpoint;
use clpu_core::harness::report::report_txt;
use clpu_core::harness::{ExperimentReport, HarnessError};
use clpu_core::metrics::{self, AuditEvent};
use clpu_core::protocol;
use clpu_core::{run_experiment, ExperimentConfig, SequenceSpec};

// ── errors and exit codes ─────────────────────────────────────────────────

enum CliError {
    Usage(String),
    Diverged(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Diverged(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Diverged(m) | CliError::Io(m) => m,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Diverged { .. } => CliError::Diverged(e.to_string()),
            HarnessError::Io(_) | HarnessError::Checkpoint(_) | HarnessError::Data(_) => {
                CliError::Io(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

/// Parses one of the kebab-case names a config file would hold for the
/// same field, so flags and files accept identical spellings.
fn parse_name<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|e| CliError::Usage(format!("bad {what} {s:?}: {e}")))
}

// ── flag groups mirroring the config file ─────────────────────────────────

#[derive(Args, Debug, Default)]
struct BenchFlags {
    /// Task family: rot-blobs, perm-blobs, split-blobs, rot-idx, perm-idx,
    /// or split-idx.
    #[arg(long)]
    family: Option<String>,
    /// Number of tasks in the stream.
    #[arg(long)]
    tasks: Option<usize>,
    /// Input dimension of the synthetic families.
    #[arg(long)]
    dim: Option<usize>,
    /// Size of the shared label space.
    #[arg(long)]
    labels: Option<usize>,
    /// Labels per task for the split families.
    #[arg(long)]
    labels_per_task: Option<usize>,
    /// Training examples per task.
    #[arg(long)]
    n_train: Option<usize>,
    /// Test examples per task.
    #[arg(long)]
    n_test: Option<usize>,
    /// Noise scale of the blob families.
    #[arg(long)]
    sigma: Option<f64>,
    /// Seed for benchmark construction.
    #[arg(long)]
    data_seed: Option<u64>,
    /// IDX training images, required with the idx families.
    #[arg(long)]
    train_images: Option<PathBuf>,
    /// IDX training labels.
    #[arg(long)]
    train_labels: Option<PathBuf>,
    /// IDX test images.
    #[arg(long)]
    test_images: Option<PathBuf>,
    /// IDX test labels.
    #[arg(long)]
    test_labels: Option<PathBuf>,
}

impl BenchFlags {
    fn apply(&self, spec: &mut BenchmarkSpec) -> Result<(), CliError> {
        if let Some(f) = &self.family {
            spec.family = parse_name::<BenchmarkFamily>("family", f)?;
        }
        if let Some(v) = self.tasks {
            spec.tasks = v;
        }
        if let Some(v) = self.dim {
            spec.dim = v;
        }
        if let Some(v) = self.labels {
            spec.num_labels = v;
        }
        if let Some(v) = self.labels_per_task {
            spec.labels_per_task = v;
        }
        if let Some(v) = self.n_train {
            spec.n_train = v;
        }
        if let Some(v) = self.n_test {
            spec.n_test = v;
        }
        if let Some(v) = self.sigma {
            spec.noise_sigma = v;
        }
        if let Some(v) = self.data_seed {
            spec.data_seed = v;
        }
        let idx = [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels];
        if idx.iter().any(|p| p.is_some()) {
            if idx.iter().any(|p| p.is_none()) {
                return Err(CliError::Usage(
                    "the four idx paths (--train-images, --train-labels, --test-images, \
                     --test-labels) must be given together"
                        .into(),
                ));
            }
            spec.idx = Some(IdxPaths {
                train_images: self.train_images.clone().unwrap(),
                train_labels: self.train_labels.clone().unwrap(),
                test_images: self.test_images.clone().unwrap(),
                test_labels: self.test_labels.clone().unwrap(),
            });
        }
        Ok(())
    }
}

#[derive(Args, Debug, Default)]
struct TrainingFlags {
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// L2 weight decay folded into each step.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Epochs per request.
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Logit-replay weight of the merge loss.
    #[arg(long)]
    alpha1: Option<f64>,
    /// Rehearsal weight of the merge loss.
    #[arg(long)]
    alpha2: Option<f64>,
    /// Primary-data weight of the replay strategies.
    #[arg(long)]
    beta: Option<f64>,
    /// Quadratic-penalty strength for ewc.
    #[arg(long)]
    ewc_lambda: Option<f64>,
    /// Distillation weight for lwf.
    #[arg(long)]
    lwf_weight: Option<f64>,
    /// Distillation temperature for lwf.
    #[arg(long)]
    lwf_temperature: Option<f64>,
    /// Stored examples per task memory.
    #[arg(long)]
    memory_size: Option<usize>,
    /// Temporary-net start: from-main or scratch.
    #[arg(long)]
    temp_init: Option<String>,
    /// Rehearsal scope: permanent-only or all-tasks.
    #[arg(long)]
    rehearsal_scope: Option<String>,
}

impl TrainingFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        let t = &mut cfg.training;
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.alpha1 {
            t.alpha1 = v;
        }
        if let Some(v) = self.alpha2 {
            t.alpha2 = v;
        }
        if let Some(v) = self.beta {
            t.beta = v;
        }
        if let Some(v) = self.ewc_lambda {
            t.ewc_lambda = v;
        }
        if let Some(v) = self.lwf_weight {
            t.lwf_weight = v;
        }
        if let Some(v) = self.lwf_temperature {
            t.lwf_temperature = v;
        }
        if let Some(v) = self.memory_size {
            t.memory_size = v;
        }
        if let Some(v) = &self.temp_init {
            t.temp_init = parse_name("temp-init", v)?;
        }
        if let Some(v) = &self.rehearsal_scope {
            t.rehearsal_scope = parse_name("rehearsal-scope", v)?;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct RunFlags {
    /// TOML config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strategy: seq, ind, ewc, lwf, er, der++, or clpu-der++.
    #[arg(long)]
    strategy: Option<String>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Master seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Named request sequence (clpu-8 or retain-4).
    #[arg(long)]
    sequence_preset: Option<String>,
    /// One request like "2 T D2" (repeatable, replaces the preset).
    #[arg(long)]
    request: Vec<String>,
    /// Memory-loss slack for the non-forgetting monitor.
    #[arg(long)]
    eq8_slack: Option<f64>,
    /// Directory for reports, accuracy matrices, and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Whether checkpoint files are written alongside the report.
    #[arg(long)]
    write_checkpoints: Option<bool>,
    #[command(flatten)]
    bench: BenchFlags,
    #[command(flatten)]
    training: TrainingFlags,
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

impl RunFlags {
    fn build(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = load_config(&self.config)?;
        if let Some(s) = &self.strategy {
            cfg.strategy = parse_name("strategy", s)?;
        }
        if let Some(h) = &self.hidden {
            cfg.hidden = h.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        match (&self.sequence_preset, self.request.is_empty()) {
            (Some(_), false) => {
                return Err(CliError::Usage(
                    "--sequence-preset and --request are mutually exclusive".into(),
                ));
            }
            (Some(name), true) => cfg.sequence = SequenceSpec::preset(name),
            (None, false) => {
                let reqs: Vec<&str> = self.request.iter().map(|s| s.as_str()).collect();
                cfg.sequence = SequenceSpec::custom(&reqs);
            }
            (None, true) => {}
        }
        if let Some(v) = self.eq8_slack {
            cfg.eq8_slack = v;
        }
        if let Some(dir) = &self.out {
            cfg.output_dir = Some(dir.clone());
        }
        if let Some(v) = self.write_checkpoints {
            cfg.write_checkpoints = v;
        }
        self.bench.apply(&mut cfg.benchmark)?;
        self.training.apply(&mut cfg)?;
        Ok(cfg)
    }
}

// ── command tree ──────────────────────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(name = "clpu", version, about = "Continual learning with private unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a benchmark and export its tasks as raw tensors.
    GenData {
        /// TOML config file; its benchmark section seeds the spec.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        bench: BenchFlags,
        /// Directory for the exported task files and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment: all seeds, retain runs, audit, report.
    Run {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Recompute the audit metrics of a finished run from its checkpoints.
    Audit {
        /// Output directory of a previous run.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Train one seed through the request sequence and print its progress.
    Train {
        #[command(flatten)]
        flags: RunFlags,
        /// Master seed for this single run.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, bench, out } => gen_data(&config, &bench, &out),
        Command::Run { flags } => run(&flags),
        Command::Audit { dir } => audit(&dir),
        Command::Train { flags, seed } => train(&flags, seed),
    }
}

// ── subcommands ───────────────────────────────────────────────────────────

fn gen_data(
    config: &Option<PathBuf>,
    flags: &BenchFlags,
    out: &std::path::Path,
) -> Result<(), CliError> {
    let mut spec = load_config(config)?.benchmark;
    flags.apply(&mut spec)?;
    let bench = Benchmark::build(&spec)
        .map_err(|e| CliError::Io(format!("building benchmark: {e}")))?;
    data::export_benchmark(&bench, out)
        .map_err(|e| CliError::Io(format!("exporting to {}: {e}", out.display())))?;
    println!("wrote {} tasks and manifest.json to {}", bench.tasks.len(), out.display());
    Ok(())
}

fn run(flags: &RunFlags) -> Result<(), CliError> {
    let cfg = flags.build()?;
    let report = run_experiment(&cfg)?;
    print!("{}", report_txt(&report));
    if let Some(dir) = &cfg.output_dir {
        println!("run artifacts written to {}", dir.display());
    }
    Ok(())
}

fn train(flags: &RunFlags, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = flags.build()?;
    let seed = seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0));
    cfg.seeds = vec![seed];
    let report = run_experiment(&cfg)?;
    let outcome = &report.per_seed[0];

    let kind = serde_json::to_value(report.config.strategy)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{:?}", report.config.strategy));
    println!("strategy {kind}, seed {seed}, arch {:?}", report.arch);
    let matrix = &outcome.matrix;
    let tasks = matrix.all_tasks();
    let header: Vec<String> = tasks.iter().map(|t| format!("task{t}")).collect();
    println!("{:>4}  {}", "t", header.join("  "));
    for t in 1..=matrix.last_t().unwrap_or(0) {
        let row: Vec<String> = tasks
            .iter()
            .map(|&s| match matrix.get(t, s) {
                Some(a) => format!("{a:>5.3}"),
                None => format!("{:>5}", "-"),
            })
            .collect();
        println!("{t:>4}  {}", row.join("  "));
    }
    for f in &outcome.forgets {
        println!(
            "request {} forgot task {}: accuracy {:.3} -> {:.3}",
            f.request_index, f.task, f.acc_before, f.acc_after
        );
    }
    println!(
        "ACC {:.4}  FM {:+.4}  memory-loss violations {}",
        outcome.acc, outcome.fm, outcome.eq8_violations
    );
    Ok(())
}

fn audit(dir: &std::path::Path) -> Result<(), CliError> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let report: ExperimentReport = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let stored = report
        .audit
        .as_ref()
        .ok_or_else(|| CliError::Usage("stored run has no audit section".into()))?;

    let bench = Benchmark::build(&report.config.benchmark)
        .map_err(|e| CliError::Io(format!("rebuilding benchmark: {e}")))?;

    let mut events = Vec::new();
    for info in &stored.events {
        let data = &bench.tasks[info.task - 1];
        let mut full = Vec::new();
        let mut retain = Vec::new();
        for seed in &report.config.seeds {
            for (name, side) in [
                (format!("full_seed{seed}_req{}.clpu", info.request_index), &mut full),
                (format!("retain_seed{seed}_{}.clpu", info.retain_key), &mut retain),
            ] {
                let state = load_checkpoint(&dir.join(&name))
                    .map_err(|e| CliError::Io(format!("{name}: {e}")))?;
                side.push(
                    protocol::output_distributions(state.serving_model(info.task), data)
                        .map_err(|e| CliError::Usage(e.to_string()))?,
                );
            }
        }
        events.push(AuditEvent { full, retain });
        println!(
            "event: request {} forgot task {} (retain run {})",
            info.request_index, info.task, info.retain_key
        );
    }

    let groups = metrics::compute_audit(&events).map_err(|e| CliError::Usage(e.to_string()))?;
    let ratio = groups.js_ratio().map_err(|e| CliError::Usage(e.to_string()))?;
    let irr = groups.irr().map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "IJSD n={} mean {:.6} sd {:.6}",
        groups.ijsd.len(),
        metrics::mean(&groups.ijsd),
        metrics::std_dev(&groups.ijsd)
    );
    println!(
        "AJSD n={} mean {:.6} sd {:.6}",
        groups.ajsd.len(),
        metrics::mean(&groups.ajsd),
        metrics::std_dev(&groups.ajsd)
    );
    println!("JS-ratio {ratio:.6}  IRR {irr:.6}");

    let drift = groups
        .ijsd
        .iter()
        .zip(&stored.ijsd)
        .chain(groups.ajsd.iter().zip(&stored.ajsd))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if groups.ijsd.len() != stored.ijsd.len()
        || groups.ajsd.len() != stored.ajsd.len()
        || drift > 1e-12
    {
        return Err(CliError::Usage(format!(
            "recomputed audit disagrees with the stored report (max drift {drift:.3e})"
        )));
    }
    println!("recomputed values match the stored report");
    Ok(())
}
