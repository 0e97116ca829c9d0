//! File-format and determinism checks for the experiment harness: the
//! checkpoint container round-trips bit-for-bit and rejects damage, report
//! files are byte-stable across runs, and timing metadata stays out of the
//! deterministic outputs.

use clpu_core::data::{BenchmarkFamily, BenchmarkSpec};
use clpu_core::harness::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use clpu_core::harness::report::report_json;
use clpu_core::nn::Arch;
use clpu_core::protocol::{self, EngineState};
use clpu_core::strategies::{StrategyConfig, StrategyKind};
use clpu_core::{run_experiment, ExperimentConfig, SequenceSpec};

fn tiny_state() -> EngineState {
    let mut spec = BenchmarkSpec::desk(BenchmarkFamily::PermBlobs, 31);
    spec.tasks = 3;
    spec.dim = 4;
    spec.num_labels = 2;
    spec.n_train = 20;
    spec.n_test = 10;
    spec.noise_sigma = 0.3;
    let bench = clpu_core::data::Benchmark::build(&spec).unwrap();

    let mut cfg = StrategyConfig::default();
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.memory_size = 8;

    let arch = Arch::new(vec![4, 6, 2]).unwrap();
    let mut state = EngineState::new(7, &arch, StrategyKind::ClpuDerPp).unwrap();
    let requests = protocol::parse_sequence("1 R D1\n2 T D2\n3 R D3").unwrap();
    protocol::run_sequence(&mut state, &requests, &bench.tasks, &cfg, None).unwrap();
    state
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.benchmark = BenchmarkSpec::desk(BenchmarkFamily::PermBlobs, 31);
    cfg.benchmark.tasks = 3;
    cfg.benchmark.dim = 4;
    cfg.benchmark.num_labels = 2;
    cfg.benchmark.n_train = 20;
    cfg.benchmark.n_test = 10;
    cfg.benchmark.noise_sigma = 0.3;
    cfg.hidden = vec![6];
    cfg.training.epochs = 2;
    cfg.training.batch_size = 8;
    cfg.training.memory_size = 8;
    cfg.seeds = vec![0, 1];
    cfg.sequence = SequenceSpec::custom(&["1 R D1", "2 T D2", "3 R D3", "2 F -"]);
    cfg.write_checkpoints = false;
    cfg
}

#[test]
fn checkpoints_round_trip_bit_for_bit() {
    let state = tiny_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.clpu");
    save_checkpoint(&state, &path).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    assert!(loaded.registry.main.bits_eq(&state.registry.main));
    assert_eq!(loaded.registry.temp.len(), state.registry.temp.len());
    for (task, net) in &state.registry.temp {
        assert!(loaded.registry.temp[task].bits_eq(net));
    }
    assert_eq!(loaded.registry.memories.len(), state.registry.memories.len());
    for (task, mem) in &state.registry.memories {
        let got = &loaded.registry.memories[task];
        assert_eq!(got.x, mem.x);
        assert_eq!(got.y, mem.y);
        assert_eq!(got.h, mem.h);
    }
    for task in 1..=3usize {
        assert_eq!(
            loaded.records_keyed_by(task),
            state.records_keyed_by(task),
            "task {task} records differ after the round trip"
        );
    }

    // Writing the same state twice produces identical bytes.
    let path2 = dir.path().join("again.clpu");
    save_checkpoint(&state, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoints_reject_damage() {
    let state = tiny_state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.clpu");
    save_checkpoint(&state, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    // The container magic is the first four bytes.
    assert_eq!(&good[..4], b"CLPU");

    let bad_magic = dir.path().join("magic.clpu");
    let mut bytes = good.clone();
    bytes[0] = b'X';
    std::fs::write(&bad_magic, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&bad_magic),
        Err(CheckpointError::BadMagic { .. })
    ));

    let bad_version = dir.path().join("version.clpu");
    let mut bytes = good.clone();
    bytes[4] = 0xFF;
    std::fs::write(&bad_version, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&bad_version),
        Err(CheckpointError::Version { .. })
    ));

    let truncated = dir.path().join("short.clpu");
    std::fs::write(&truncated, &good[..good.len() / 2]).unwrap();
    assert!(load_checkpoint(&truncated).is_err());

    let missing = dir.path().join("nowhere.clpu");
    assert!(matches!(load_checkpoint(&missing), Err(CheckpointError::Io(_))));
}

#[test]
fn reports_are_byte_stable_and_timestamp_free() {
    let cfg = tiny_experiment();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();

    let ja = report_json(&a).unwrap();
    let jb = report_json(&b).unwrap();
    assert_eq!(ja, jb, "two runs of the same config must serialize identically");

    for banned in ["started_unix_secs", "finished_unix_secs", "duration_secs"] {
        assert!(
            !ja.contains(banned),
            "report.json must stay deterministic, found {banned}"
        );
    }

    // The accuracy matrices land in CSV form with the fixed header.
    let csv = a.per_seed[0].matrix.to_csv();
    assert!(csv.starts_with("t,s,accuracy\n"));
    assert_eq!(csv, b.per_seed[0].matrix.to_csv());
}

#[test]
fn on_disk_run_layout_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment();
    cfg.output_dir = Some(dir.path().to_path_buf());
    cfg.write_checkpoints = true;
    run_experiment(&cfg).unwrap();

    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for expected in [
        "accmatrix_seed0.csv",
        "accmatrix_seed1.csv",
        "full_seed0_final.clpu",
        "full_seed0_req4.clpu",
        "full_seed1_final.clpu",
        "full_seed1_req4.clpu",
        "metadata.json",
        "report.json",
        "report.txt",
        "retain_seed0_sub0.clpu",
        "retain_seed1_sub0.clpu",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected} in {names:?}");
    }

    let metadata = std::fs::read_to_string(dir.path().join("metadata.json")).unwrap();
    assert!(metadata.contains("started_unix_secs"));
    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(report.contains("js_ratio"));
}
