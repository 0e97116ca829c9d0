//! Run metrics: the accuracy matrix with its two summary numbers, and the
//! output-distribution audit that quantifies how well forgetting hides a
//! task (in-group and across-group divergences, their ratio, and the
//! indistinguishability rate).

use crate::data::Dataset;
use crate::nn::{self, NetParams, NnError};
use crate::protocol::TaskId;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("nothing to audit")]
    NothingToAudit,
    #[error("degenerate in-group")]
    DegenerateInGroup,
    #[error("accuracy matrix is empty")]
    EmptyMatrix,
    #[error("no retained task at the final request")]
    EmptyFinalStatus,
    #[error("accuracy matrix has no entry for t={t}, task {s}")]
    MissingEntry { t: usize, s: TaskId },
    #[error("task {0} has no first-learned index")]
    MissingFirstLearned(TaskId),
    #[error("audit runs disagree in shape: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

// ── accuracy ──────────────────────────────────────────────────────────────

/// Fraction of a task's test set the net classifies correctly, with the
/// argmax restricted to the task's label mask. Ties go to the lowest
/// class index.
pub fn eval_accuracy(params: &NetParams, data: &Dataset) -> Result<f64, MetricsError> {
    let classes = params.arch().n_classes();
    let n = data.n_test();
    let logits = nn::forward(params, &data.test_x, n)?;
    let mut mask = data.mask.clone();
    mask.sort_unstable();
    let mut correct = 0usize;
    for r in 0..n {
        let row = &logits[r * classes..(r + 1) * classes];
        let mut best = mask[0];
        for &c in &mask[1..] {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == data.test_y[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracy of already-computed output distributions against labels, with
/// the same tie rule as [`eval_accuracy`]. Off-mask classes carry zero
/// probability, so the argmax never leaves the mask.
pub fn accuracy_from_distributions(
    probs: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64, MetricsError> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} distributions against {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (row, &y) in probs.iter().zip(labels) {
        let mut best = 0usize;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// The matrix a^t_s of per-task test accuracies after each request, plus
/// the request index at which each task was first learned.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: BTreeMap<usize, BTreeMap<TaskId, f64>>,
    first_learned: BTreeMap<TaskId, usize>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, t: usize, s: TaskId, acc: f64) {
        self.rows.entry(t).or_default().insert(s, acc);
    }

    pub fn note_first_learned(&mut self, s: TaskId, t: usize) {
        self.first_learned.entry(s).or_insert(t);
    }

    pub fn get(&self, t: usize, s: TaskId) -> Option<f64> {
        self.rows.get(&t).and_then(|row| row.get(&s)).copied()
    }

    pub fn first_learned(&self, s: TaskId) -> Option<usize> {
        self.first_learned.get(&s).copied()
    }

    /// Largest request index with any entry.
    pub fn last_t(&self) -> Option<usize> {
        self.rows.keys().next_back().copied()
    }

    /// Every task id that ever appears, sorted.
    pub fn all_tasks(&self) -> Vec<TaskId> {
        let mut ids: Vec<TaskId> = self
            .rows
            .values()
            .flat_map(|row| row.keys().copied())
            .chain(self.first_learned.keys().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Renders the full grid as CSV with header `t,s,accuracy`; cells with
    /// no entry (the task was not retained at that point) print -1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,s,accuracy\n");
        let Some(last) = self.last_t() else { return out };
        let tasks = self.all_tasks();
        for t in 1..=last {
            for &s in &tasks {
                match self.get(t, s) {
                    Some(a) => out.push_str(&format!("{t},{s},{a:.6}\n")),
                    None => out.push_str(&format!("{t},{s},-1\n")),
                }
            }
        }
        out
    }
}

/// Final average accuracy and forgetting measure over the tasks retained at
/// the last request: the mean of a^T_s, and the mean drop from each task's
/// first-learned accuracy a^{tau(s)}_s to a^T_s.
pub fn compute_acc_fm(matrix: &AccuracyMatrix) -> Result<(f64, f64), MetricsError> {
    let last = matrix.last_t().ok_or(MetricsError::EmptyMatrix)?;
    let final_tasks: Vec<TaskId> = matrix
        .all_tasks()
        .into_iter()
        .filter(|&s| matrix.get(last, s).is_some())
        .collect();
    if final_tasks.is_empty() {
        return Err(MetricsError::EmptyFinalStatus);
    }
    let mut acc_sum = 0.0;
    let mut fm_sum = 0.0;
    for &s in &final_tasks {
        let a_final = matrix.get(last, s).expect("filtered above");
        let tau = matrix.first_learned(s).ok_or(MetricsError::MissingFirstLearned(s))?;
        let a_first = matrix.get(tau, s).ok_or(MetricsError::MissingEntry { t: tau, s })?;
        acc_sum += a_final;
        fm_sum += a_first - a_final;
    }
    let k = final_tasks.len() as f64;
    Ok((acc_sum / k, fm_sum / k))
}

// ── output-distribution audit ─────────────────────────────────────────────

/// One forget event's audit material: for each seed, the full run's serving
/// outputs captured right after the forget request, and the matching retain
/// run's final outputs, both over the forgotten task's test set.
#[derive(Debug, Clone)]
pub struct AuditEvent {
    pub full: Vec<Vec<Vec<f64>>>,
    pub retain: Vec<Vec<Vec<f64>>>,
}

/// The two divergence groups of the audit, averaged over forget events:
/// in-group values compare retain runs pairwise, across-group values
/// compare each full run against each retain run.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditGroups {
    pub ijsd: Vec<f64>,
    pub ajsd: Vec<f64>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn mean_jsd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricsError::ShapeMismatch(format!(
            "output sets of {} and {} examples",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0;
    for (p, q) in a.iter().zip(b) {
        acc += nn::jsd(p, q)?;
    }
    Ok(acc / a.len() as f64)
}

/// Builds the audit groups from per-seed snapshots across forget events.
/// With c seeds this yields c(c-1)/2 in-group values (each a mean over
/// events of the mean per-example divergence between two retain runs) and
/// c^2 across-group values (full run i against retain run j).
pub fn compute_audit(events: &[AuditEvent]) -> Result<AuditGroups, MetricsError> {
    if events.is_empty() {
        return Err(MetricsError::NothingToAudit);
    }
    let c = events[0].retain.len();
    if c < 2 {
        return Err(MetricsError::NothingToAudit);
    }
    for ev in events {
        if ev.retain.len() != c || ev.full.len() != c {
            return Err(MetricsError::ShapeMismatch(format!(
                "expected {c} runs per group, got {} full and {} retain",
                ev.full.len(),
                ev.retain.len()
            )));
        }
    }
    let n_events = events.len() as f64;
    let mut ijsd = Vec::with_capacity(c * (c - 1) / 2);
    for i in 0..c {
        for j in (i + 1)..c {
            let mut acc = 0.0;
            for ev in events {
                acc += mean_jsd(&ev.retain[i], &ev.retain[j])?;
            }
            ijsd.push(acc / n_events);
        }
    }
    let mut ajsd = Vec::with_capacity(c * c);
    for i in 0..c {
        for j in 0..c {
            let mut acc = 0.0;
            for ev in events {
                acc += mean_jsd(&ev.full[i], &ev.retain[j])?;
            }
            ajsd.push(acc / n_events);
        }
    }
    Ok(AuditGroups { ijsd, ajsd })
}

impl AuditGroups {
    /// Relative gap between group means: |mean(in) - mean(across)| over
    /// mean(in). Zero in-group mean has no defined ratio.
    pub fn js_ratio(&self) -> Result<f64, MetricsError> {
        if self.ijsd.is_empty() || self.ajsd.is_empty() {
            return Err(MetricsError::NothingToAudit);
        }
        let mi = mean(&self.ijsd);
        if mi == 0.0 {
            return Err(MetricsError::DegenerateInGroup);
        }
        Ok((mi - mean(&self.ajsd)).abs() / mi)
    }

    /// Fraction of across-group values inside the in-group range, that is
    /// at most max(in-group).
    pub fn irr(&self) -> Result<f64, MetricsError> {
        if self.ijsd.is_empty() || self.ajsd.is_empty() {
            return Err(MetricsError::NothingToAudit);
        }
        let hi = self.ijsd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let inside = self.ajsd.iter().filter(|&&v| v <= hi).count();
        Ok(inside as f64 / self.ajsd.len() as f64)
    }
}
