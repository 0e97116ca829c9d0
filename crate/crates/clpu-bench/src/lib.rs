//! Shared setup for the criterion benches: small but realistic fixtures so
//! timings reflect the kernels the experiment harness spends its time in.

use clpu_core::data::{Benchmark, BenchmarkFamily, BenchmarkSpec, Dataset};
use clpu_core::labels;
use clpu_core::nn::{init_params, Arch, Batch, LossSpec, NetParams};
use clpu_core::rng::derive_stream;

/// A desk-scale benchmark task plus a matching initialized network.
pub struct Fixture {
    pub arch: Arch,
    pub params: NetParams,
    pub task: Dataset,
}

pub fn fixture() -> Fixture {
    let spec = BenchmarkSpec::desk(BenchmarkFamily::PermBlobs, 17);
    let bench = Benchmark::build(&spec).expect("benchmark");
    let task = bench.tasks.into_iter().next().expect("task");
    let arch = Arch::new(vec![task.d_in, 100, 100, task.n_labels]).expect("arch");
    let mut stream = derive_stream(17, &labels!["bench", "init"]).expect("stream");
    let params = init_params(&arch, &mut stream);
    Fixture { arch, params, task }
}

/// First `n` training examples of the fixture task as one batch.
pub fn batch(task: &Dataset, n: usize) -> Batch {
    let d = task.d_in;
    let x = task.train_x[..n * d].to_vec();
    let y = task.train_y[..n].to_vec();
    Batch::new(x, y, d)
}

pub fn ce_spec() -> LossSpec {
    LossSpec::ce(1.0)
}
