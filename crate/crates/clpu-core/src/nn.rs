//! Numeric kernel: fully connected nets, losses, gradients, SGD, and the
//! Jensen-Shannon distance.
//!
//! Parameters and served logits are 32-bit floats so model states can be
//! compared and checkpointed bit-for-bit; every reduction and every gradient
//! runs in 64-bit internally. All functions here are pure: identical inputs
//! give bit-identical outputs, which the rest of the crate depends on.

use crate::rng::RandStream;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("architecture needs at least input and output dims, got {0:?}")]
    ArchTooShort(Vec<usize>),
    #[error("zero-sized layer in architecture {0:?}")]
    ZeroSizedLayer(Vec<usize>),
    #[error("dimension mismatch: expected input width {expected}, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("label {label} outside mask")]
    LabelOutsideMask { label: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss spec has no positive term")]
    EmptyLossSpec,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("stored logits required by loss spec but absent from batch")]
    MissingStoredLogits,
    #[error("diverged: non-finite gradient")]
    Diverged,
    #[error("non-normalized input to jsd (sum {0})")]
    NotNormalized(f64),
    #[error("negative probability in jsd input")]
    NegativeProbability,
}

// ── architecture and parameters ──────────────────────────────────────────

/// Layer widths, input first: `[d_in, hidden.., C]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    dims: Vec<usize>,
}

impl Arch {
    pub fn new(dims: Vec<usize>) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::ArchTooShort(dims));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(NnError::ZeroSizedLayer(dims));
        }
        Ok(Arch { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    /// Total label count C (width of the shared output head).
    pub fn n_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum()
    }
}

/// Network parameters: per layer a row-major out×in weight matrix and a bias
/// vector, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    arch: Arch,
    w: Vec<Vec<f32>>,
    b: Vec<Vec<f32>>,
}

impl NetParams {
    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn weights(&self) -> &[Vec<f32>] {
        &self.w
    }

    pub fn biases(&self) -> &[Vec<f32>] {
        &self.b
    }

    /// Rebuilds params from raw per-layer storage (checkpoint loading).
    pub fn from_parts(arch: Arch, w: Vec<Vec<f32>>, b: Vec<Vec<f32>>) -> Result<Self, NnError> {
        let dims = arch.dims();
        if w.len() != arch.n_layers() || b.len() != arch.n_layers() {
            return Err(NnError::Shape("layer count mismatch".into()));
        }
        for l in 0..arch.n_layers() {
            if w[l].len() != dims[l + 1] * dims[l] || b[l].len() != dims[l + 1] {
                return Err(NnError::Shape(format!("layer {l} storage size mismatch")));
            }
        }
        Ok(NetParams { arch, w, b })
    }

    /// All parameters in a fixed order: layer 0 weights row-major, layer 0
    /// biases, layer 1 weights, and so on.
    pub fn flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for l in 0..self.arch.n_layers() {
            out.extend_from_slice(&self.w[l]);
            out.extend_from_slice(&self.b[l]);
        }
        out
    }

    /// Bitwise equality of every stored float, distinguishing -0.0 from 0.0.
    pub fn bits_eq(&self, other: &NetParams) -> bool {
        if self.arch != other.arch {
            return false;
        }
        let eq = |a: &[Vec<f32>], b: &[Vec<f32>]| {
            a.iter().zip(b).all(|(x, y)| {
                x.iter()
                    .zip(y.iter())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
            })
        };
        eq(&self.w, &other.w) && eq(&self.b, &other.b)
    }
}

/// Fresh parameters: weights uniform in ±√(6/fan_in), biases zero. Draw
/// order is fixed (layers in order, rows in order) so the result is a pure
/// function of the stream.
pub fn init_params(arch: &Arch, stream: &mut RandStream) -> NetParams {
    let dims = arch.dims();
    let mut w = Vec::with_capacity(arch.n_layers());
    let mut b = Vec::with_capacity(arch.n_layers());
    for l in 0..arch.n_layers() {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut layer = Vec::with_capacity(fan_out * fan_in);
        for _ in 0..fan_out * fan_in {
            layer.push(((2.0 * stream.next_uniform() - 1.0) * bound) as f32);
        }
        w.push(layer);
        b.push(vec![0.0f32; fan_out]);
    }
    NetParams { arch: arch.clone(), w, b }
}

// ── batches and loss specs ────────────────────────────────────────────────

/// A batch of examples: inputs row-major n×d, integer labels, optionally
/// stored logits (n×C) and a label mask restricting the valid classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub h: Option<Vec<f32>>,
    pub mask: Option<Vec<usize>>,
    pub n: usize,
    pub d: usize,
}

impl Batch {
    pub fn new(x: Vec<f32>, y: Vec<usize>, d: usize) -> Self {
        let n = if d == 0 { 0 } else { x.len() / d };
        Batch { x, y, h: None, mask: None, n, d }
    }

    pub fn with_logits(mut self, h: Vec<f32>) -> Self {
        self.h = Some(h);
        self
    }

    pub fn with_mask(mut self, mask: Vec<usize>) -> Self {
        self.mask = Some(mask);
        self
    }
}

/// Coefficients combining the three loss terms over one batch. The distill
/// term softens both sides by `temperature`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub weight_ce: f64,
    pub weight_mse: f64,
    pub weight_distill: f64,
    pub temperature: f64,
}

impl LossSpec {
    pub fn ce(weight: f64) -> Self {
        LossSpec { weight_ce: weight, weight_mse: 0.0, weight_distill: 0.0, temperature: 1.0 }
    }

    pub fn mse(weight: f64) -> Self {
        LossSpec { weight_ce: 0.0, weight_mse: weight, weight_distill: 0.0, temperature: 1.0 }
    }

    pub fn distill(weight: f64, temperature: f64) -> Self {
        LossSpec { weight_ce: 0.0, weight_mse: 0.0, weight_distill: weight, temperature }
    }

    fn validate(&self) -> Result<(), NnError> {
        let ws = [self.weight_ce, self.weight_mse, self.weight_distill];
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) || ws.iter().all(|w| *w == 0.0) {
            return Err(NnError::EmptyLossSpec);
        }
        if !(self.temperature > 0.0) {
            return Err(NnError::BadTemperature(self.temperature));
        }
        Ok(())
    }

    fn needs_logits(&self) -> bool {
        self.weight_mse > 0.0 || self.weight_distill > 0.0
    }
}

// ── forward ───────────────────────────────────────────────────────────────

/// Activations of every layer in f64, input first, logits last. ReLU on
/// hidden layers, linear output.
fn forward_acts(p: &NetParams, x: &[f32], n: usize) -> Result<Vec<Vec<f64>>, NnError> {
    let dims = p.arch.dims();
    if x.len() != n * dims[0] {
        return Err(NnError::InputWidth { expected: dims[0], got: if n == 0 { 0 } else { x.len() / n } });
    }
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
    acts.push(x.iter().map(|&v| v as f64).collect());
    for l in 0..p.arch.n_layers() {
        let (din, dout) = (dims[l], dims[l + 1]);
        let prev = &acts[l];
        let wl = &p.w[l];
        let bl = &p.b[l];
        let last = l + 1 == p.arch.n_layers();
        let mut out = vec![0.0f64; n * dout];
        for r in 0..n {
            let row = &prev[r * din..(r + 1) * din];
            for o in 0..dout {
                let wrow = &wl[o * din..(o + 1) * din];
                let mut acc = bl[o] as f64;
                for i in 0..din {
                    acc += wrow[i] as f64 * row[i];
                }
                out[r * dout + o] = if last { acc } else { acc.max(0.0) };
            }
        }
        acts.push(out);
    }
    Ok(acts)
}

/// Logits (n×C, f32) for a batch of inputs. Accumulates in f64 and rounds
/// once at the end, so stored logits are reproducible bit-for-bit.
pub fn forward(p: &NetParams, x: &[f32], n: usize) -> Result<Vec<f32>, NnError> {
    let acts = forward_acts(p, x, n)?;
    Ok(acts.last().unwrap().iter().map(|&v| v as f32).collect())
}

// ── losses ────────────────────────────────────────────────────────────────

fn check_labels(y: &[usize], classes: usize, mask: Option<&[usize]>) -> Result<(), NnError> {
    for &label in y {
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        if let Some(m) = mask {
            if !m.contains(&label) {
                return Err(NnError::LabelOutsideMask { label });
            }
        }
    }
    Ok(())
}

/// Log-sum-exp over the masked entries of one logit row, max-stabilized.
fn masked_lse(row: &[f64], mask: Option<&[usize]>) -> f64 {
    let max = match mask {
        Some(m) => m.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max),
        None => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let sum: f64 = match mask {
        Some(m) => m.iter().map(|&j| (row[j] - max).exp()).sum(),
        None => row.iter().map(|&v| (v - max).exp()).sum(),
    };
    max + sum.ln()
}

/// Mean cross-entropy over the batch: log-sum-exp of the (masked) logits
/// minus the true-label logit.
pub fn loss_ce(
    logits: &[f32],
    classes: usize,
    y: &[usize],
    mask: Option<&[usize]>,
) -> Result<f64, NnError> {
    if logits.len() != y.len() * classes {
        return Err(NnError::Shape(format!(
            "logits len {} != n {} × classes {classes}",
            logits.len(),
            y.len()
        )));
    }
    check_labels(y, classes, mask)?;
    let n = y.len();
    let mut total = 0.0f64;
    for r in 0..n {
        let row: Vec<f64> = logits[r * classes..(r + 1) * classes]
            .iter()
            .map(|&v| v as f64)
            .collect();
        total += masked_lse(&row, mask) - row[y[r]];
    }
    Ok(total / n as f64)
}

/// Mean over the batch of ½‖logits − stored‖².
pub fn loss_mse_logits(logits: &[f32], stored: &[f32], classes: usize) -> Result<f64, NnError> {
    if logits.len() != stored.len() || logits.len() % classes != 0 {
        return Err(NnError::Shape(format!(
            "mse shapes: {} vs {} (classes {classes})",
            logits.len(),
            stored.len()
        )));
    }
    let n = logits.len() / classes;
    let mut total = 0.0f64;
    for (a, b) in logits.iter().zip(stored) {
        let d = *a as f64 - *b as f64;
        total += 0.5 * d * d;
    }
    Ok(total / n as f64)
}

/// Log-softmax of one row at the given temperature.
fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&v| v / temperature).collect();
    let lse = masked_lse(&scaled, None);
    scaled.iter().map(|&v| v - lse).collect()
}

/// Mean over the batch of KL(softmax(logits/T) ‖ softmax(stored/T)).
/// Stored logits are normalized by softmax because KL needs a distribution.
pub fn loss_distill(
    logits: &[f32],
    stored: &[f32],
    classes: usize,
    temperature: f64,
) -> Result<f64, NnError> {
    if !(temperature > 0.0) {
        return Err(NnError::BadTemperature(temperature));
    }
    if logits.len() != stored.len() || logits.len() % classes != 0 {
        return Err(NnError::Shape(format!(
            "distill shapes: {} vs {} (classes {classes})",
            logits.len(),
            stored.len()
        )));
    }
    let n = logits.len() / classes;
    let mut total = 0.0f64;
    for r in 0..n {
        let z: Vec<f64> = logits[r * classes..(r + 1) * classes]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let h: Vec<f64> = stored[r * classes..(r + 1) * classes]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let lp = log_softmax(&z, temperature);
        let lq = log_softmax(&h, temperature);
        let mut kl = 0.0f64;
        for j in 0..classes {
            let p = lp[j].exp();
            if p > 0.0 {
                kl += p * (lp[j] - lq[j]);
            }
        }
        total += kl;
    }
    Ok(total / n as f64)
}

// ── gradients ─────────────────────────────────────────────────────────────

/// Gradient with the same layout as [`NetParams`], stored in f64 so that
/// accumulating many weighted terms stays exact enough for rehearsal sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(p: &NetParams) -> Self {
        Grads {
            w: p.w.iter().map(|l| vec![0.0; l.len()]).collect(),
            b: p.b.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }

    /// self += coef · other, elementwise.
    pub fn add_scaled(&mut self, coef: f64, other: &Grads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += coef * *y;
            }
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += coef * *y;
            }
        }
    }

    pub fn scale(&mut self, coef: f64) {
        for l in self.w.iter_mut().chain(self.b.iter_mut()) {
            for v in l {
                *v *= coef;
            }
        }
    }

    /// Same fixed order as [`NetParams::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.w.len() {
            out.extend_from_slice(&self.w[l]);
            out.extend_from_slice(&self.b[l]);
        }
        out
    }

    /// self += coef · v, with v in the [`NetParams::flat`] order.
    pub fn add_flat(&mut self, coef: f64, v: &[f64]) {
        let mut k = 0;
        for l in 0..self.w.len() {
            for x in self.w[l].iter_mut() {
                *x += coef * v[k];
                k += 1;
            }
            for x in self.b[l].iter_mut() {
                *x += coef * v[k];
                k += 1;
            }
        }
        debug_assert_eq!(k, v.len());
    }

    pub fn is_finite(&self) -> bool {
        self.w
            .iter()
            .chain(self.b.iter())
            .all(|l| l.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.w
            .iter()
            .chain(self.b.iter())
            .flat_map(|l| l.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn validate_batch(p: &NetParams, batch: &Batch, spec: &LossSpec) -> Result<(), NnError> {
    spec.validate()?;
    let classes = p.arch.n_classes();
    if batch.d != p.arch.d_in() {
        return Err(NnError::InputWidth { expected: p.arch.d_in(), got: batch.d });
    }
    if batch.x.len() != batch.n * batch.d {
        return Err(NnError::Shape("batch input storage size".into()));
    }
    if spec.weight_ce > 0.0 {
        if batch.y.len() != batch.n {
            return Err(NnError::Shape("label count != batch rows".into()));
        }
        check_labels(&batch.y, classes, batch.mask.as_deref())?;
    }
    if spec.needs_logits() {
        match &batch.h {
            None => return Err(NnError::MissingStoredLogits),
            Some(h) if h.len() != batch.n * classes => {
                return Err(NnError::Shape("stored logits shape".into()))
            }
            _ => {}
        }
    }
    Ok(())
}

/// d(weighted loss)/d(logits) for every row, n×C.
fn output_delta(
    logits: &[Vec<f64>],
    batch: &Batch,
    spec: &LossSpec,
    classes: usize,
) -> Vec<Vec<f64>> {
    let n = batch.n;
    let inv_n = 1.0 / n as f64;
    let mut delta = vec![vec![0.0f64; classes]; n];
    for r in 0..n {
        let z = &logits[r];
        if spec.weight_ce > 0.0 {
            let mask = batch.mask.as_deref();
            let lse = masked_lse(z, mask);
            let coef = spec.weight_ce * inv_n;
            let mut bump = |j: usize| {
                delta[r][j] += coef * (z[j] - lse).exp();
            };
            match mask {
                Some(m) => m.iter().for_each(|&j| bump(j)),
                None => (0..classes).for_each(&mut bump),
            }
            delta[r][batch.y[r]] -= coef;
        }
        if spec.weight_mse > 0.0 {
            let h = batch.h.as_ref().unwrap();
            let coef = spec.weight_mse * inv_n;
            for j in 0..classes {
                delta[r][j] += coef * (z[j] - h[r * classes + j] as f64);
            }
        }
        if spec.weight_distill > 0.0 {
            let h = batch.h.as_ref().unwrap();
            let hrow: Vec<f64> = h[r * classes..(r + 1) * classes]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let t = spec.temperature;
            let lp = log_softmax(z, t);
            let lq = log_softmax(&hrow, t);
            let mut kl = 0.0f64;
            for j in 0..classes {
                let p = lp[j].exp();
                if p > 0.0 {
                    kl += p * (lp[j] - lq[j]);
                }
            }
            let coef = spec.weight_distill * inv_n / t;
            for j in 0..classes {
                let p = lp[j].exp();
                if p > 0.0 {
                    delta[r][j] += coef * p * ((lp[j] - lq[j]) - kl);
                }
            }
        }
    }
    delta
}

/// Exact reverse-mode gradient of the weighted loss over one batch.
pub fn grad(p: &NetParams, batch: &Batch, spec: &LossSpec) -> Result<Grads, NnError> {
    validate_batch(p, batch, spec)?;
    let dims = p.arch.dims();
    let classes = p.arch.n_classes();
    let n = batch.n;
    let acts = forward_acts(p, &batch.x, n)?;
    let logit_rows: Vec<Vec<f64>> = (0..n)
        .map(|r| acts.last().unwrap()[r * classes..(r + 1) * classes].to_vec())
        .collect();
    let mut delta = output_delta(&logit_rows, batch, spec, classes);

    let mut g = Grads::zeros_like(p);
    for l in (0..p.arch.n_layers()).rev() {
        let (din, dout) = (dims[l], dims[l + 1]);
        let below = &acts[l];
        for r in 0..n {
            let arow = &below[r * din..(r + 1) * din];
            let drow = &delta[r];
            for o in 0..dout {
                let d = drow[o];
                if d == 0.0 {
                    continue;
                }
                let wrow = &mut g.w[l][o * din..(o + 1) * din];
                for i in 0..din {
                    wrow[i] += d * arow[i];
                }
                g.b[l][o] += d;
            }
        }
        if l > 0 {
            let wl = &p.w[l];
            let mut next = vec![vec![0.0f64; din]; n];
            for r in 0..n {
                let arow = &below[r * din..(r + 1) * din];
                let drow = &delta[r];
                let nrow = &mut next[r];
                for o in 0..dout {
                    let d = drow[o];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &wl[o * din..(o + 1) * din];
                    for i in 0..din {
                        nrow[i] += wrow[i] as f64 * d;
                    }
                }
                for i in 0..din {
                    if arow[i] <= 0.0 {
                        nrow[i] = 0.0;
                    }
                }
            }
            delta = next;
        }
    }
    Ok(g)
}

/// Weighted loss value with the same f64 evaluation path the gradient uses.
pub fn loss_value(p: &NetParams, batch: &Batch, spec: &LossSpec) -> Result<f64, NnError> {
    validate_batch(p, batch, spec)?;
    let classes = p.arch.n_classes();
    let n = batch.n;
    let acts = forward_acts(p, &batch.x, n)?;
    let logits = acts.last().unwrap();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0f64;
    for r in 0..n {
        let z = &logits[r * classes..(r + 1) * classes];
        if spec.weight_ce > 0.0 {
            let lse = masked_lse(z, batch.mask.as_deref());
            total += spec.weight_ce * inv_n * (lse - z[batch.y[r]]);
        }
        if spec.weight_mse > 0.0 {
            let h = batch.h.as_ref().unwrap();
            let mut sq = 0.0f64;
            for j in 0..classes {
                let d = z[j] - h[r * classes + j] as f64;
                sq += d * d;
            }
            total += spec.weight_mse * inv_n * 0.5 * sq;
        }
        if spec.weight_distill > 0.0 {
            let h = batch.h.as_ref().unwrap();
            let hrow: Vec<f64> = h[r * classes..(r + 1) * classes]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let lp = log_softmax(z, spec.temperature);
            let lq = log_softmax(&hrow, spec.temperature);
            let mut kl = 0.0f64;
            for j in 0..classes {
                let pj = lp[j].exp();
                if pj > 0.0 {
                    kl += pj * (lp[j] - lq[j]);
                }
            }
            total += spec.weight_distill * inv_n * kl;
        }
    }
    Ok(total)
}

// ── optimizer ─────────────────────────────────────────────────────────────

/// One SGD step with decoupled-from-nothing plain weight decay:
/// θ' = θ − lr·(g + wd·θ). Computed in f64, rounded to f32 once.
pub fn sgd_step(p: &NetParams, g: &Grads, lr: f64, weight_decay: f64) -> Result<NetParams, NnError> {
    let mut out = p.clone();
    sgd_step_mut(&mut out, g, lr, weight_decay)?;
    Ok(out)
}

/// In-place variant of [`sgd_step`] for hot training loops.
pub fn sgd_step_mut(
    p: &mut NetParams,
    g: &Grads,
    lr: f64,
    weight_decay: f64,
) -> Result<(), NnError> {
    if !g.is_finite() {
        return Err(NnError::Diverged);
    }
    for l in 0..p.arch.n_layers() {
        for (v, gv) in p.w[l].iter_mut().zip(&g.w[l]) {
            *v = (*v as f64 - lr * (gv + weight_decay * *v as f64)) as f32;
        }
        for (v, gv) in p.b[l].iter_mut().zip(&g.b[l]) {
            *v = (*v as f64 - lr * (gv + weight_decay * *v as f64)) as f32;
        }
    }
    Ok(())
}

/// Smallest |pre-activation| over all hidden units for a batch of inputs.
/// Finite-difference gradient probes step parameters by about 1e-4, so a
/// case whose margin is within reach of a ReLU kink should be redrawn
/// rather than checked against the analytic gradient.
pub fn relu_margin(p: &NetParams, x: &[f32], n: usize) -> f64 {
    let dims = p.arch.dims();
    let mut prev: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut margin = f64::INFINITY;
    for l in 0..p.arch.n_layers() - 1 {
        let (din, dout) = (dims[l], dims[l + 1]);
        let mut out = vec![0.0f64; n * dout];
        for r in 0..n {
            for o in 0..dout {
                let mut acc = p.b[l][o] as f64;
                for i in 0..din {
                    acc += p.w[l][o * din + i] as f64 * prev[r * din + i];
                }
                margin = margin.min(acc.abs());
                out[r * dout + o] = acc.max(0.0);
            }
        }
        prev = out;
    }
    margin
}

// ── probabilities and divergence ──────────────────────────────────────────

/// Softmax of one logit row restricted to `mask` (full head when absent),
/// returned as a length-C distribution with zeros off-mask.
pub fn softmax_probs(row: &[f32], mask: Option<&[usize]>) -> Vec<f64> {
    let z: Vec<f64> = row.iter().map(|&v| v as f64).collect();
    let lse = masked_lse(&z, mask);
    let mut out = vec![0.0f64; row.len()];
    match mask {
        Some(m) => {
            for &j in m {
                out[j] = (z[j] - lse).exp();
            }
        }
        None => {
            for j in 0..row.len() {
                out[j] = (z[j] - lse).exp();
            }
        }
    }
    out
}

/// Jensen-Shannon distance: √(½KL(P‖M) + ½KL(Q‖M)) with M the midpoint,
/// natural log. Symmetric, and bounded by √(ln 2).
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, NnError> {
    if p.len() != q.len() {
        return Err(NnError::Shape(format!("jsd lengths {} vs {}", p.len(), q.len())));
    }
    for v in p.iter().chain(q.iter()) {
        if *v < 0.0 {
            return Err(NnError::NegativeProbability);
        }
    }
    for dist in [p, q] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NnError::NotNormalized(sum));
        }
    }
    // The two KL sums accumulate separately so that swapping the arguments
    // produces bit-identical output.
    let mut kl_p = 0.0f64;
    let mut kl_q = 0.0f64;
    for j in 0..p.len() {
        let m = 0.5 * (p[j] + q[j]);
        if p[j] > 0.0 {
            kl_p += p[j] * (p[j] / m).ln();
        }
        if q[j] > 0.0 {
            kl_q += q[j] * (q[j] / m).ln();
        }
    }
    Ok((0.5 * (kl_p + kl_q)).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels;
    use crate::rng::derive_stream;

    fn stream(tag: &str) -> RandStream {
        derive_stream(11, &labels![tag]).unwrap()
    }

    fn arch(dims: &[usize]) -> Arch {
        Arch::new(dims.to_vec()).unwrap()
    }

    #[test]
    fn arch_validation() {
        assert!(matches!(Arch::new(vec![2, 0, 2]), Err(NnError::ZeroSizedLayer(_))));
        assert!(matches!(Arch::new(vec![5]), Err(NnError::ArchTooShort(_))));
        assert_eq!(arch(&[4, 3, 2]).param_count(), 23);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = arch(&[4, 3, 2]);
        let p1 = init_params(&a, &mut stream("init"));
        let p2 = init_params(&a, &mut stream("init"));
        assert!(p1.bits_eq(&p2));
        let bound0 = (6.0f64 / 4.0).sqrt() as f32;
        assert!(p1.w[0].iter().all(|v| v.abs() <= bound0));
        assert!(p1.b.iter().all(|l| l.iter().all(|v| *v == 0.0)));
        assert_eq!(p1.flat().len(), 23);
    }

    #[test]
    fn forward_zero_params_gives_zero_logits() {
        let a = arch(&[3, 4, 2]);
        let p = NetParams {
            arch: a.clone(),
            w: vec![vec![0.0; 12], vec![0.0; 8]],
            b: vec![vec![0.0; 4], vec![0.0; 2]],
        };
        let out = forward(&p, &[1.0, -2.0, 3.0], 1).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_single_layer_matches_hand_multiply() {
        let a = arch(&[2, 2]);
        let p = NetParams {
            arch: a,
            w: vec![vec![1.0, 2.0, 3.0, -1.0]],
            b: vec![vec![0.5, -0.5]],
        };
        // row 0: [1·1 + 2·2 + 0.5, 3·1 + (−1)·2 − 0.5] = [5.5, 0.5]
        let out = forward(&p, &[1.0, 2.0], 1).unwrap();
        assert_eq!(out, vec![5.5, 0.5]);
    }

    #[test]
    fn forward_preserves_row_order() {
        let a = arch(&[2, 3, 2]);
        let p = init_params(&a, &mut stream("rows"));
        let x = vec![0.1, 0.2, -0.4, 0.9, 1.5, -1.5];
        let all = forward(&p, &x, 3).unwrap();
        for r in 0..3 {
            let one = forward(&p, &x[r * 2..(r + 1) * 2], 1).unwrap();
            assert_eq!(&all[r * 2..(r + 1) * 2], one.as_slice());
        }
    }

    #[test]
    fn forward_rejects_bad_width() {
        let a = arch(&[3, 2]);
        let p = init_params(&a, &mut stream("w"));
        assert!(forward(&p, &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn ce_examples() {
        let ln2 = std::f64::consts::LN_2;
        let got = loss_ce(&[0.0, 0.0], 2, &[0], None).unwrap();
        assert!((got - ln2).abs() < 1e-12);

        let got = loss_ce(&[10.0, -10.0], 2, &[0], None).unwrap();
        // ln(1 + e^{-20})
        assert!((got - 2.0611536e-9).abs() < 1e-13, "{got}");

        let got = loss_ce(&[0.0, 0.0, 99.0, 99.0], 4, &[1], Some(&[0, 1])).unwrap();
        assert!((got - ln2).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_logits_equal_log_mask_size() {
        let logits = vec![0.7f32; 6];
        let got = loss_ce(&logits, 6, &[2], None).unwrap();
        assert!((got - (6.0f64).ln()).abs() < 1e-12);
        let got = loss_ce(&logits, 6, &[2], Some(&[1, 2, 4])).unwrap();
        assert!((got - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_label_errors() {
        assert_eq!(
            loss_ce(&[0.0, 0.0], 2, &[2], None).unwrap_err(),
            NnError::LabelOutOfRange { label: 2, classes: 2 }
        );
        assert_eq!(
            loss_ce(&[0.0; 4], 4, &[3], Some(&[0, 1])).unwrap_err(),
            NnError::LabelOutsideMask { label: 3 }
        );
    }

    #[test]
    fn mse_examples() {
        assert_eq!(loss_mse_logits(&[1.0, 2.0], &[1.0, 2.0], 2).unwrap(), 0.0);
        assert_eq!(loss_mse_logits(&[1.0, 2.0], &[0.0, 0.0], 2).unwrap(), 2.5);
        let base = loss_mse_logits(&[1.0, 2.0], &[0.0, 0.0], 2).unwrap();
        let scaled = loss_mse_logits(&[2.0, 4.0], &[0.0, 0.0], 2).unwrap();
        assert!((scaled - 4.0 * base).abs() < 1e-12);
        assert!(loss_mse_logits(&[1.0], &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn distill_examples() {
        assert_eq!(loss_distill(&[1.0, -2.0], &[1.0, -2.0], 2, 2.0).unwrap(), 0.0);
        // teacher logits (ln 3, 0) soften to probs (0.75, 0.25) at T=1
        let t = (3.0f64).ln() as f32;
        let got = loss_distill(&[0.0, 0.0], &[t, 0.0], 2, 1.0).unwrap();
        let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((got - expect).abs() < 1e-7, "{got} vs {expect}");
        assert!((got - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn distill_nonnegative_on_random_pairs() {
        let mut s = stream("distill-pairs");
        for _ in 0..50 {
            let z: Vec<f32> = (0..4).map(|_| s.next_gaussian() as f32 * 3.0).collect();
            let h: Vec<f32> = (0..4).map(|_| s.next_gaussian() as f32 * 3.0).collect();
            assert!(loss_distill(&z, &h, 4, 2.0).unwrap() >= 0.0);
        }
    }

    fn random_net_and_batch(
        s: &mut RandStream,
        dims: &[usize],
        n: usize,
        masked: bool,
    ) -> (NetParams, Batch) {
        let a = arch(dims);
        let p = init_params(&a, s);
        let classes = a.n_classes();
        let x: Vec<f32> = (0..n * a.d_in()).map(|_| s.next_gaussian() as f32).collect();
        let mask: Option<Vec<usize>> = if masked && classes >= 2 {
            Some(vec![0, classes - 1])
        } else {
            None
        };
        let y: Vec<usize> = (0..n)
            .map(|_| match &mask {
                Some(m) => m[(s.next_u64() % m.len() as u64) as usize],
                None => (s.next_u64() % classes as u64) as usize,
            })
            .collect();
        let h: Vec<f32> = (0..n * classes).map(|_| s.next_gaussian() as f32).collect();
        let mut batch = Batch::new(x, y, a.d_in()).with_logits(h);
        if let Some(m) = mask {
            batch = batch.with_mask(m);
        }
        (p, batch)
    }


    /// Central finite differences against the f64 loss path. The divisor is
    /// the actually-representable f32 step, not 2ε, so parameter rounding
    /// does not pollute the estimate.
    fn fd_grad(p: &NetParams, batch: &Batch, spec: &LossSpec) -> Vec<f64> {
        let eps = 1e-4f64;
        let mut out = Vec::with_capacity(p.arch.param_count());
        let mut probe = p.clone();
        for l in 0..p.arch.n_layers() {
            for kind in 0..2 {
                let len = if kind == 0 { p.w[l].len() } else { p.b[l].len() };
                for i in 0..len {
                    let orig = if kind == 0 { p.w[l][i] } else { p.b[l][i] };
                    let hi = (orig as f64 + eps) as f32;
                    let lo = (orig as f64 - eps) as f32;
                    let slot = |probe: &mut NetParams, v: f32| {
                        if kind == 0 {
                            probe.w[l][i] = v;
                        } else {
                            probe.b[l][i] = v;
                        }
                    };
                    slot(&mut probe, hi);
                    let up = loss_value(&probe, batch, spec).unwrap();
                    slot(&mut probe, lo);
                    let down = loss_value(&probe, batch, spec).unwrap();
                    slot(&mut probe, orig);
                    out.push((up - down) / (hi as f64 - lo as f64));
                }
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut s = stream("fd");
        let specs = [
            LossSpec::ce(1.0),
            LossSpec::mse(1.0),
            LossSpec::distill(1.0, 2.0),
            LossSpec { weight_ce: 0.5, weight_mse: 0.25, weight_distill: 0.0, temperature: 1.0 },
            LossSpec { weight_ce: 0.3, weight_mse: 0.3, weight_distill: 0.4, temperature: 2.0 },
        ];
        let archs: [&[usize]; 3] = [&[3, 5, 4], &[2, 4, 4, 3], &[4, 6, 2]];
        let mut checked = 0;
        for round in 0..24 {
            let dims = archs[round % archs.len()];
            let spec = specs[round % specs.len()];
            let masked = round % 2 == 0 && spec.weight_ce > 0.0;
            let (p, batch) = (0..100)
                .find_map(|_| {
                    let (p, batch) = random_net_and_batch(&mut s, dims, 3, masked);
                    (relu_margin(&p, &batch.x, batch.n) > 1e-2).then_some((p, batch))
                })
                .expect("a kink-free case within 100 draws");
            let g = grad(&p, &batch, &spec).unwrap().flat();
            let fd = fd_grad(&p, &batch, &spec);
            let diff: f64 = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            assert!(
                diff / scale < 1e-4,
                "round {round}: rel err {}",
                diff / scale
            );
            checked += 1;
        }
        assert!(checked >= 20);
    }

    #[test]
    fn gradient_is_linear_in_loss_weights() {
        let mut s = stream("linear");
        let (p, batch) = random_net_and_batch(&mut s, &[3, 4, 3], 4, false);
        let g_ce = grad(&p, &batch, &LossSpec::ce(1.0)).unwrap().flat();
        let g_mse = grad(&p, &batch, &LossSpec::mse(1.0)).unwrap().flat();
        let spec = LossSpec { weight_ce: 0.7, weight_mse: 0.2, weight_distill: 0.0, temperature: 1.0 };
        let g_mix = grad(&p, &batch, &spec).unwrap().flat();
        for j in 0..g_mix.len() {
            let want = 0.7 * g_ce[j] + 0.2 * g_mse[j];
            assert!((g_mix[j] - want).abs() < 1e-12 + 1e-9 * want.abs());
        }
    }

    #[test]
    fn gradient_near_zero_at_mse_minimum() {
        // With stored logits equal to the net's own outputs the mse term
        // sits at its exact minimum.
        let mut s = stream("minimum");
        let a = arch(&[3, 4, 2]);
        let p = init_params(&a, &mut s);
        let x: Vec<f32> = (0..6).map(|_| s.next_gaussian() as f32).collect();
        let h = forward(&p, &x, 2).unwrap();
        let batch = Batch::new(x, vec![], 3).with_logits(h);
        let g = grad(&p, &batch, &LossSpec::mse(1.0)).unwrap();
        assert!(g.norm() < 1e-6, "norm {}", g.norm());
    }

    #[test]
    fn grad_requires_stored_logits() {
        let mut s = stream("missing-h");
        let a = arch(&[2, 3, 2]);
        let p = init_params(&a, &mut s);
        let batch = Batch::new(vec![0.1, 0.2], vec![0], 2);
        assert_eq!(
            grad(&p, &batch, &LossSpec::mse(1.0)).unwrap_err(),
            NnError::MissingStoredLogits
        );
    }

    #[test]
    fn grad_is_pure() {
        let mut s = stream("pure");
        let (p, batch) = random_net_and_batch(&mut s, &[3, 4, 3], 4, true);
        let spec = LossSpec { weight_ce: 1.0, weight_mse: 0.5, weight_distill: 0.0, temperature: 1.0 };
        let g1 = grad(&p, &batch, &spec).unwrap();
        let g2 = grad(&p, &batch, &spec).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn sgd_examples() {
        let a = arch(&[1, 1]);
        let p = NetParams { arch: a, w: vec![vec![1.0]], b: vec![vec![0.0]] };
        let g = Grads::zeros_like(&p);
        let stepped = sgd_step(&p, &g, 0.01, 0.0005).unwrap();
        assert_eq!(stepped.w[0][0], 0.999995f32);
        assert_eq!(stepped.b[0][0], 0.0);

        let same = sgd_step(&p, &g, 0.01, 0.0).unwrap();
        assert!(same.bits_eq(&p));

        let zero = NetParams {
            arch: arch(&[1, 1]),
            w: vec![vec![0.0]],
            b: vec![vec![0.0]],
        };
        let mut g1 = Grads::zeros_like(&zero);
        g1.add_flat(1.0, &[1.0, 0.0]);
        let stepped = sgd_step(&zero, &g1, 0.01, 0.0).unwrap();
        assert_eq!(stepped.w[0][0], -0.01f32);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let a = arch(&[1, 1]);
        let p = NetParams { arch: a, w: vec![vec![1.0]], b: vec![vec![0.0]] };
        let mut g = Grads::zeros_like(&p);
        g.add_flat(1.0, &[f64::NAN, 0.0]);
        assert_eq!(sgd_step(&p, &g, 0.1, 0.0).unwrap_err(), NnError::Diverged);
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut s = stream("softmax");
        for _ in 0..20 {
            let row: Vec<f32> = (0..5).map(|_| s.next_gaussian() as f32 * 4.0).collect();
            let p = softmax_probs(&row, None);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let pm = softmax_probs(&row, Some(&[1, 3]));
            assert!((pm.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(pm[0], 0.0);
            assert_eq!(pm[2], 0.0);
            assert_eq!(pm[4], 0.0);
        }
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let max = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((max - std::f64::consts::LN_2.sqrt()).abs() < 1e-12);
        let mid = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((mid - 0.2157616).abs() < 1e-4 || (mid * mid - 0.2157616).abs() < 1e-4);
        assert!((mid - 0.4645).abs() < 1e-4);
    }

    #[test]
    fn jsd_rejects_bad_inputs() {
        assert!(matches!(
            jsd(&[0.5, 0.6], &[0.5, 0.5]).unwrap_err(),
            NnError::NotNormalized(_)
        ));
        assert_eq!(
            jsd(&[1.5, -0.5], &[0.5, 0.5]).unwrap_err(),
            NnError::NegativeProbability
        );
    }

    #[test]
    fn jsd_is_a_metric_on_spot_checks() {
        let mut s = stream("jsd-metric");
        let mut random_dist = |k: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..k).map(|_| s.next_uniform() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        };
        for _ in 0..50 {
            let (p, q, r) = (random_dist(4), random_dist(4), random_dist(4));
            let (pq, qp) = (jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
            assert_eq!(pq, qp);
            assert!(pq <= std::f64::consts::LN_2.sqrt() + 1e-12);
            let (pr, rq) = (jsd(&p, &r).unwrap(), jsd(&r, &q).unwrap());
            assert!(pq <= pr + rq + 1e-12);
        }
    }
}
