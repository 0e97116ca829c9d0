//! The shared SGD loop. Every strategy builds a [`TrainJob`] describing one
//! request's objective; the loop walks the primary source in shuffled
//! minibatches for a fixed number of epochs and adds the rehearsal,
//! distillation, and penalty gradients at every step.

use crate::data::Dataset;
use crate::nn::{self, Batch, Grads, LossSpec, NetParams};
use crate::protocol::{EngineError, EpisodicMemory, TaskId};
use crate::rng::{derive_stream, Label};
use crate::strategies::{EwcAnchor, StrategyConfig};
use std::collections::BTreeMap;

/// What the minibatches are drawn from.
pub(super) enum Primary<'a> {
    /// A task's training split, cross-entropy style objectives.
    Data { data: &'a Dataset, spec: LossSpec },
    /// One episodic memory, for merging a temporary task into the main net.
    Memory { mem: &'a EpisodicMemory, spec: LossSpec },
    /// No primary source; only rehearsal terms drive the updates, stepped
    /// as many times per epoch as the combined memory pool would fill
    /// minibatches.
    Pool,
}

/// One rehearsal term: a full pass over a stored memory, its gradient
/// scaled by `coef`.
pub(super) struct RehearsalTerm<'a> {
    pub mem: &'a EpisodicMemory,
    pub coef: f64,
    pub spec: LossSpec,
}

/// Quadratic penalties pulling the parameters toward stored anchors.
pub(super) struct EwcPenalty<'a> {
    pub lambda: f64,
    pub anchors: &'a BTreeMap<TaskId, EwcAnchor>,
}

impl EwcPenalty<'_> {
    fn add_to(&self, p: &NetParams, g: &mut Grads) {
        if self.anchors.is_empty() || self.lambda == 0.0 {
            return;
        }
        let theta = p.flat();
        let mut pen = vec![0.0f64; theta.len()];
        for anchor in self.anchors.values() {
            for j in 0..pen.len() {
                pen[j] += anchor.fisher[j] * (theta[j] as f64 - anchor.params[j]);
            }
        }
        g.add_flat(2.0 * self.lambda, &pen);
    }
}

pub(super) struct TrainJob<'a> {
    pub primary: Primary<'a>,
    pub rehearsal: Vec<RehearsalTerm<'a>>,
    /// Net whose logits on each primary minibatch become the distillation
    /// target. Only meaningful with a `Data` primary.
    pub teacher: Option<&'a NetParams>,
    pub penalty: Option<EwcPenalty<'a>>,
    pub epochs: usize,
    pub seed: u64,
    /// Stream context prefix; `["epoch", e, "shuffle"]` is appended per
    /// epoch, so the draws depend only on the task and purpose, never on
    /// where the request sits in the sequence.
    pub ctx: Vec<Label>,
}

fn gather_memory(mem: &EpisodicMemory, idx: &[usize]) -> Batch {
    let d = mem.d_in;
    let c = mem.n_classes;
    let mut x = Vec::with_capacity(idx.len() * d);
    let mut y = Vec::with_capacity(idx.len());
    let mut h = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        x.extend_from_slice(&mem.x[i * d..(i + 1) * d]);
        y.push(mem.y[i]);
        h.extend_from_slice(&mem.h[i * c..(i + 1) * c]);
    }
    Batch::new(x, y, d).with_logits(h).with_mask(mem.mask.clone())
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

/// Runs the job against `params` in place.
pub(super) fn run(
    params: &mut NetParams,
    job: &TrainJob<'_>,
    cfg: &StrategyConfig,
) -> Result<(), EngineError> {
    let bs = cfg.batch_size.max(1);
    let rehearsal: Vec<(Batch, f64, &LossSpec)> = job
        .rehearsal
        .iter()
        .filter(|t| t.coef != 0.0 && !t.mem.is_empty())
        .map(|t| (t.mem.as_batch(), t.coef, &t.spec))
        .collect();

    for e in 0..job.epochs {
        let order: Option<Vec<usize>> = match &job.primary {
            Primary::Data { data, .. } => {
                let mut ctx = job.ctx.clone();
                ctx.extend([Label::from("epoch"), Label::from(e), Label::from("shuffle")]);
                Some(derive_stream(job.seed, &ctx)?.shuffle(data.n_train()))
            }
            Primary::Memory { mem, .. } => {
                let mut ctx = job.ctx.clone();
                ctx.extend([Label::from("epoch"), Label::from(e), Label::from("shuffle")]);
                Some(derive_stream(job.seed, &ctx)?.shuffle(mem.len()))
            }
            Primary::Pool => None,
        };
        let steps = match (&job.primary, &order) {
            (_, Some(ord)) => div_ceil(ord.len(), bs),
            (Primary::Pool, None) => {
                let pool: usize = rehearsal.iter().map(|(b, _, _)| b.n).sum();
                div_ceil(pool, bs)
            }
            _ => unreachable!(),
        };
        for step in 0..steps {
            let mut g = Grads::zeros_like(params);
            match &job.primary {
                Primary::Data { data, spec } => {
                    let ord = order.as_ref().expect("data primary has an order");
                    let chunk = &ord[step * bs..((step + 1) * bs).min(ord.len())];
                    let (bx, by) = data.gather_train(chunk);
                    let mut batch = Batch::new(bx, by, data.d_in).with_mask(data.mask.clone());
                    if let Some(teacher) = job.teacher {
                        let h = nn::forward(teacher, &batch.x, batch.n)?;
                        batch = batch.with_logits(h);
                    }
                    g.add_scaled(1.0, &nn::grad(params, &batch, spec)?);
                }
                Primary::Memory { mem, spec } => {
                    let ord = order.as_ref().expect("memory primary has an order");
                    let chunk = &ord[step * bs..((step + 1) * bs).min(ord.len())];
                    let batch = gather_memory(mem, chunk);
                    g.add_scaled(1.0, &nn::grad(params, &batch, spec)?);
                }
                Primary::Pool => {}
            }
            for (batch, coef, spec) in &rehearsal {
                g.add_scaled(*coef, &nn::grad(params, batch, spec)?);
            }
            if let Some(pen) = &job.penalty {
                pen.add_to(params, &mut g);
            }
            nn::sgd_step_mut(params, &g, cfg.lr, cfg.weight_decay)?;
        }
    }
    Ok(())
}
