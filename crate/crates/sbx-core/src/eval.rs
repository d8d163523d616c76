//! Accuracy over seen classes, averaged-accuracy summaries, and memory
//! byte accounting.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::memory::{ReplayMemory, SbdMemory};
use crate::nets::{r_path_logits, Encoder, ModelState, SelfAttention};
use crate::tensor::Tensor;

/// Which accuracy series a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    ValidationCurrent,
    ValidationTask0,
    TestSeen,
}

impl EvalSplit {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalSplit::ValidationCurrent => "validation-current",
            EvalSplit::ValidationTask0 => "validation-task0",
            EvalSplit::TestSeen => "test-seen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "validation-current" => Some(EvalSplit::ValidationCurrent),
            "validation-task0" => Some(EvalSplit::ValidationTask0),
            "test-seen" => Some(EvalSplit::TestSeen),
            _ => None,
        }
    }
}

/// One accuracy measurement emitted during a run.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: u64,
    pub split: EvalSplit,
    pub accuracy: f64,
    pub seen_classes: Vec<usize>,
}

/// Argmax accuracy of logits against labels; ties pick the first maximum.
pub fn accuracy_from_logits(logits: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape {
            op: "accuracy_from_logits",
            detail: format!("logits {s:?} vs {} labels", labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty { what: "accuracy_from_logits" });
    }
    let c = s[1];
    let mut correct = 0usize;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// r-path accuracy over the samples whose label is in `seen_classes`.
/// The argmax runs over all classes; unseen-class logits may compete.
pub fn evaluate(
    encoder: &Encoder<f32>,
    sa: &SelfAttention<f32>,
    model: &ModelState<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    seen_classes: &BTreeSet<usize>,
    chunk: usize,
) -> Result<f64> {
    if seen_classes.is_empty() {
        return Err(Error::Empty { what: "evaluate: seen_classes" });
    }
    let keep: Vec<usize> =
        (0..labels.len()).filter(|&i| seen_classes.contains(&labels[i])).collect();
    if keep.is_empty() {
        return Err(Error::Empty { what: "evaluate: filtered test set" });
    }
    let chunk = chunk.max(1);
    let mut correct = 0usize;
    for part in keep.chunks(chunk) {
        let batch = images.gather_rows(part)?;
        let batch_labels: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
        let logits = r_path_logits(encoder, sa, model, &batch)?;
        let acc = accuracy_from_logits(&logits, &batch_labels)?;
        correct += (acc * batch_labels.len() as f64).round() as usize;
    }
    Ok(correct as f64 / keep.len() as f64)
}

/// Arithmetic mean of per-task accuracies.
pub fn a_avg(task_accuracies: &[f64]) -> Result<f64> {
    if task_accuracies.is_empty() {
        return Err(Error::Empty { what: "a_avg" });
    }
    Ok(task_accuracies.iter().sum::<f64>() / task_accuracies.len() as f64)
}

/// Byte accounting: stored elements times 4 bytes each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetReport {
    pub replay_bytes: u64,
    pub sbd_bytes: u64,
}

impl BudgetReport {
    pub fn total_bytes(&self) -> u64 {
        self.replay_bytes + self.sbd_bytes
    }
}

pub fn budget_report(replay: &ReplayMemory, sbd: &SbdMemory) -> BudgetReport {
    let replay_elements: usize = replay.samples().iter().map(|s| s.image.numel()).sum();
    BudgetReport {
        replay_bytes: replay_elements as u64 * 4,
        sbd_bytes: sbd.feature_elements() as u64 * 4,
    }
}
