//! Benchmark construction: synthetic Gaussian-blob classification with
//! rotation, permutation, and class-split task families, plus IDX-format
//! image ingestion for the same three variants.
//!
//! Generation is pure given a seed. Task k of a rotation or permutation
//! family is derived from one shared base dataset under a stream keyed by k,
//! so rebuilding any single task never depends on which other tasks exist.

use crate::labels;
use crate::rng::{derive_stream, RandStream};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("need dim >= 2, got {0}")]
    DimTooSmall(usize),
    #[error("{which} size {n} not divisible by {num_labels} labels (balance enforced)")]
    NotBalanced { which: &'static str, n: usize, num_labels: usize },
    #[error("{num_labels} labels not divisible by {labels_per_task} labels per task")]
    SplitNotDivisible { num_labels: usize, labels_per_task: usize },
    #[error("task count {tasks} does not match {derived} derived from the label split")]
    SplitTaskCount { tasks: usize, derived: usize },
    #[error("task count must be at least 1")]
    NoTasks,
    #[error("bad magic in {path}: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { path: String, expected: u32, got: u32 },
    #[error("truncated file {path}: wanted {wanted} bytes, got {got}")]
    Truncated { path: String, wanted: usize, got: usize },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("idx paths required for family {0:?}")]
    MissingIdxPaths(BenchmarkFamily),
    #[error("empty dataset half in {0}")]
    EmptyIdx(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Rng(#[from] crate::rng::RngError),
}

/// One task's data: train and test halves, the feature width, the total
/// label count C, and the subset of labels this task actually uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train_x: Vec<f32>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<f32>,
    pub test_y: Vec<usize>,
    pub d_in: usize,
    pub n_labels: usize,
    pub mask: Vec<usize>,
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_y.len()
    }

    /// Copies the selected train rows into a contiguous minibatch.
    pub fn gather_train(&self, idx: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.d_in);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(&self.train_x[i * self.d_in..(i + 1) * self.d_in]);
            y.push(self.train_y[i]);
        }
        (x, y)
    }
}

/// One half (train or test) of an ingested dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub d_in: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkFamily {
    RotBlobs,
    PermBlobs,
    SplitBlobs,
    RotIdx,
    PermIdx,
    SplitIdx,
}

impl BenchmarkFamily {
    pub fn is_idx(self) -> bool {
        matches!(self, BenchmarkFamily::RotIdx | BenchmarkFamily::PermIdx | BenchmarkFamily::SplitIdx)
    }

    fn is_split(self) -> bool {
        matches!(self, BenchmarkFamily::SplitBlobs | BenchmarkFamily::SplitIdx)
    }
}

/// The four IDX files backing an ingested benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

fn default_tasks() -> usize {
    5
}
fn default_dim() -> usize {
    32
}
fn default_num_labels() -> usize {
    10
}
fn default_n_train() -> usize {
    1000
}
fn default_n_test() -> usize {
    500
}
fn default_noise() -> f64 {
    0.6
}
fn default_labels_per_task() -> usize {
    2
}

/// Everything needed to regenerate a benchmark deterministically. Sizes are
/// per task; split families generate a base of `n_train × tasks` rows and
/// partition it by label. IDX families use the files as loaded and ignore
/// the blob sizing fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub family: BenchmarkFamily,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_num_labels")]
    pub num_labels: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_labels_per_task")]
    pub labels_per_task: usize,
    #[serde(default)]
    pub idx: Option<IdxPaths>,
}

impl BenchmarkSpec {
    pub fn desk(family: BenchmarkFamily, data_seed: u64) -> Self {
        BenchmarkSpec {
            family,
            tasks: default_tasks(),
            dim: default_dim(),
            num_labels: default_num_labels(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            noise_sigma: default_noise(),
            data_seed,
            labels_per_task: default_labels_per_task(),
            idx: None,
        }
    }
}

/// A fully generated task family, tasks indexed from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub tasks: Vec<Dataset>,
}

// ── blob generation ───────────────────────────────────────────────────────

/// Draws a point uniformly on the sphere of the given radius: a gaussian
/// vector, normalized.
fn sphere_point(dim: usize, radius: f64, stream: &mut RandStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| stream.next_gaussian()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

/// Balanced Gaussian-blob dataset: one mean per label on a radius-3 sphere,
/// examples are mean plus `noise_sigma` times standard gaussian noise.
/// Examples are laid out label-major; training shuffles per epoch anyway.
pub fn gen_blob_base(
    num_labels: usize,
    dim: usize,
    n_train: usize,
    n_test: usize,
    noise_sigma: f64,
    stream: &mut RandStream,
) -> Result<Dataset, DataError> {
    if num_labels < 2 {
        return Err(DataError::TooFewLabels(num_labels));
    }
    if dim < 2 {
        return Err(DataError::DimTooSmall(dim));
    }
    if n_train % num_labels != 0 {
        return Err(DataError::NotBalanced { which: "train", n: n_train, num_labels });
    }
    if n_test % num_labels != 0 {
        return Err(DataError::NotBalanced { which: "test", n: n_test, num_labels });
    }
    let means: Vec<Vec<f64>> = (0..num_labels)
        .map(|_| sphere_point(dim, 3.0, stream))
        .collect();
    let fill = |per_label: usize, stream: &mut RandStream| {
        let mut x = Vec::with_capacity(per_label * num_labels * dim);
        let mut y = Vec::with_capacity(per_label * num_labels);
        for (label, mean) in means.iter().enumerate() {
            for _ in 0..per_label {
                for &m in mean {
                    x.push((m + noise_sigma * stream.next_gaussian()) as f32);
                }
                y.push(label);
            }
        }
        (x, y)
    };
    let (train_x, train_y) = fill(n_train / num_labels, stream);
    let (test_x, test_y) = fill(n_test / num_labels, stream);
    Ok(Dataset {
        train_x,
        train_y,
        test_x,
        test_y,
        d_in: dim,
        n_labels: num_labels,
        mask: (0..num_labels).collect(),
    })
}

// ── rotation ──────────────────────────────────────────────────────────────

/// Random orthogonal matrix (row-major dim×dim, f64): a gaussian matrix
/// orthonormalized row-by-row with modified Gram-Schmidt.
pub fn random_orthogonal(dim: usize, stream: &mut RandStream) -> Vec<f64> {
    let mut q = vec![0.0f64; dim * dim];
    for r in 0..dim {
        loop {
            for v in &mut q[r * dim..(r + 1) * dim] {
                *v = stream.next_gaussian();
            }
            for prev in 0..r {
                let dot: f64 = (0..dim).map(|c| q[r * dim + c] * q[prev * dim + c]).sum();
                for c in 0..dim {
                    q[r * dim + c] -= dot * q[prev * dim + c];
                }
            }
            let norm = q[r * dim..(r + 1) * dim]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > 1e-8 {
                for v in &mut q[r * dim..(r + 1) * dim] {
                    *v /= norm;
                }
                break;
            }
        }
    }
    q
}

/// Applies a fixed matrix to every input row, train and test.
pub fn rotate_with(base: &Dataset, q: &[f64]) -> Dataset {
    let dim = base.d_in;
    debug_assert_eq!(q.len(), dim * dim);
    let apply = |x: &[f32]| -> Vec<f32> {
        let n = x.len() / dim;
        let mut out = vec![0.0f32; x.len()];
        for r in 0..n {
            let row = &x[r * dim..(r + 1) * dim];
            for o in 0..dim {
                let mut acc = 0.0f64;
                for c in 0..dim {
                    acc += q[o * dim + c] * row[c] as f64;
                }
                out[r * dim + o] = acc as f32;
            }
        }
        out
    };
    Dataset {
        train_x: apply(&base.train_x),
        test_x: apply(&base.test_x),
        ..base.clone()
    }
}

/// Rotation variant: one random orthogonal transform applied to all inputs,
/// labels unchanged.
pub fn rotate_variant(base: &Dataset, stream: &mut RandStream) -> Dataset {
    let q = random_orthogonal(base.d_in, stream);
    rotate_with(base, &q)
}

// ── permutation ───────────────────────────────────────────────────────────

/// Reorders features: output feature i takes input feature perm[i].
pub fn permute_with(base: &Dataset, perm: &[usize]) -> Dataset {
    let dim = base.d_in;
    debug_assert_eq!(perm.len(), dim);
    let apply = |x: &[f32]| -> Vec<f32> {
        let n = x.len() / dim;
        let mut out = vec![0.0f32; x.len()];
        for r in 0..n {
            for i in 0..dim {
                out[r * dim + i] = x[r * dim + perm[i]];
            }
        }
        out
    };
    Dataset {
        train_x: apply(&base.train_x),
        test_x: apply(&base.test_x),
        ..base.clone()
    }
}

/// Permutation variant: one random feature permutation for all inputs.
pub fn permute_variant(base: &Dataset, stream: &mut RandStream) -> Dataset {
    let perm = stream.shuffle(base.d_in);
    permute_with(base, &perm)
}

// ── class split ───────────────────────────────────────────────────────────

/// Partitions a dataset by label into tasks of `labels_per_task` consecutive
/// labels each. Global label indices are preserved; each task's mask is its
/// own label slice.
pub fn split_tasks(base: &Dataset, labels_per_task: usize) -> Result<Vec<Dataset>, DataError> {
    if labels_per_task == 0 || base.n_labels % labels_per_task != 0 {
        return Err(DataError::SplitNotDivisible {
            num_labels: base.n_labels,
            labels_per_task,
        });
    }
    let k = base.n_labels / labels_per_task;
    let dim = base.d_in;
    let mut out = Vec::with_capacity(k);
    for t in 0..k {
        let lo = t * labels_per_task;
        let hi = lo + labels_per_task;
        let filter = |x: &[f32], y: &[usize]| {
            let mut fx = Vec::new();
            let mut fy = Vec::new();
            for (i, &label) in y.iter().enumerate() {
                if (lo..hi).contains(&label) {
                    fx.extend_from_slice(&x[i * dim..(i + 1) * dim]);
                    fy.push(label);
                }
            }
            (fx, fy)
        };
        let (train_x, train_y) = filter(&base.train_x, &base.train_y);
        let (test_x, test_y) = filter(&base.test_x, &base.test_y);
        out.push(Dataset {
            train_x,
            train_y,
            test_x,
            test_y,
            d_in: dim,
            n_labels: base.n_labels,
            mask: (lo..hi).collect(),
        });
    }
    Ok(out)
}

// ── IDX ingestion ─────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn read_be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    let end = at + 4;
    if buf.len() < end {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            wanted: end,
            got: buf.len(),
        });
    }
    Ok(u32::from_be_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]]))
}

/// Loads one train or test half from an IDX image/label file pair. Pixels
/// are scaled to [0,1] and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<SplitData, DataError> {
    let img = read_all(images_path)?;
    let magic = read_be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_be_u32(&img, 4, images_path)? as usize;
    let rows = read_be_u32(&img, 8, images_path)? as usize;
    let cols = read_be_u32(&img, 12, images_path)? as usize;
    let d_in = rows * cols;
    let wanted = 16 + count * d_in;
    if img.len() < wanted {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            wanted,
            got: img.len(),
        });
    }

    let lab = read_all(labels_path)?;
    let magic = read_be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let lab_count = read_be_u32(&lab, 4, labels_path)? as usize;
    if lab_count != count {
        return Err(DataError::CountMismatch { images: count, labels: lab_count });
    }
    let wanted = 8 + lab_count;
    if lab.len() < wanted {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            wanted,
            got: lab.len(),
        });
    }
    if count == 0 {
        return Err(DataError::EmptyIdx(images_path.display().to_string()));
    }

    let x: Vec<f32> = img[16..16 + count * d_in]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    let y: Vec<usize> = lab[8..8 + count].iter().map(|&b| b as usize).collect();
    Ok(SplitData { x, y, d_in })
}

fn idx_base(paths: &IdxPaths) -> Result<Dataset, DataError> {
    let train = load_idx(&paths.train_images, &paths.train_labels)?;
    let test = load_idx(&paths.test_images, &paths.test_labels)?;
    let n_labels = train
        .y
        .iter()
        .chain(test.y.iter())
        .copied()
        .max()
        .unwrap_or(0)
        + 1;
    Ok(Dataset {
        train_x: train.x,
        train_y: train.y,
        test_x: test.x,
        test_y: test.y,
        d_in: train.d_in,
        n_labels,
        mask: (0..n_labels).collect(),
    })
}

// ── benchmark assembly ────────────────────────────────────────────────────

impl Benchmark {
    /// Generates all tasks for the spec. Pure: the same spec always yields
    /// byte-identical data.
    pub fn build(spec: &BenchmarkSpec) -> Result<Benchmark, DataError> {
        if spec.tasks == 0 {
            return Err(DataError::NoTasks);
        }
        let base = if spec.family.is_idx() {
            let paths = spec.idx.as_ref().ok_or(DataError::MissingIdxPaths(spec.family))?;
            idx_base(paths)?
        } else {
            let scale = if spec.family.is_split() { spec.tasks } else { 1 };
            let mut s = derive_stream(spec.data_seed, &labels!["data", "base"])?;
            gen_blob_base(
                spec.num_labels,
                spec.dim,
                spec.n_train * scale,
                spec.n_test * scale,
                spec.noise_sigma,
                &mut s,
            )?
        };

        let tasks = match spec.family {
            BenchmarkFamily::SplitBlobs | BenchmarkFamily::SplitIdx => {
                let split = split_tasks(&base, spec.labels_per_task)?;
                if split.len() != spec.tasks {
                    return Err(DataError::SplitTaskCount { tasks: spec.tasks, derived: split.len() });
                }
                split
            }
            BenchmarkFamily::RotBlobs | BenchmarkFamily::RotIdx => {
                let mut tasks = vec![base.clone()];
                for k in 1..spec.tasks {
                    let mut s = derive_stream(spec.data_seed, &labels!["data", "rot", k])?;
                    tasks.push(rotate_variant(&base, &mut s));
                }
                tasks
            }
            BenchmarkFamily::PermBlobs | BenchmarkFamily::PermIdx => {
                let mut tasks = vec![base.clone()];
                for k in 1..spec.tasks {
                    let mut s = derive_stream(spec.data_seed, &labels!["data", "perm", k])?;
                    tasks.push(permute_variant(&base, &mut s));
                }
                tasks
            }
        };
        Ok(Benchmark { spec: spec.clone(), tasks })
    }
}

// ── flat binary export ────────────────────────────────────────────────────

#[derive(Serialize)]
struct ExportManifest<'a> {
    spec: &'a BenchmarkSpec,
    tasks: Vec<ExportTask>,
}

#[derive(Serialize)]
struct ExportTask {
    task: usize,
    n_train: usize,
    n_test: usize,
    d_in: usize,
    n_labels: usize,
    mask: Vec<usize>,
    files: [String; 4],
}

fn write_f32le(path: &Path, data: &[f32]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)
}

fn write_u32le(path: &Path, data: &[usize]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(*v as u32).to_le_bytes());
    }
    fs::write(path, bytes)
}

/// Writes every task as raw little-endian arrays plus a `manifest.json`
/// describing shapes and the generating spec.
pub fn export_benchmark(bench: &Benchmark, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut manifest = ExportManifest { spec: &bench.spec, tasks: Vec::new() };
    for (k, task) in bench.tasks.iter().enumerate() {
        let files = [
            format!("task{k}_train_x.f32le"),
            format!("task{k}_train_y.u32le"),
            format!("task{k}_test_x.f32le"),
            format!("task{k}_test_y.u32le"),
        ];
        write_f32le(&dir.join(&files[0]), &task.train_x)?;
        write_u32le(&dir.join(&files[1]), &task.train_y)?;
        write_f32le(&dir.join(&files[2]), &task.test_x)?;
        write_u32le(&dir.join(&files[3]), &task.test_y)?;
        manifest.tasks.push(ExportTask {
            task: k,
            n_train: task.n_train(),
            n_test: task.n_test(),
            d_in: task.d_in,
            n_labels: task.n_labels,
            mask: task.mask.clone(),
            files,
        });
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}
