//! Capacity-bounded replay memory with importance-scored eviction, and the
//! append-only (optionally budgeted) store of synthetic boundary samples.
//!
//! Importance is an exponentially smoothed estimate of the observed loss
//! decrease a sample sees when the model updates. Eviction removes the
//! least important sample; ties fall to the most numerous class, then to
//! the oldest sample.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sbd::{save_sbd_store, SbdBatch};
use crate::tensor::Tensor;

/// One stored raw sample.
#[derive(Clone, Debug)]
pub struct ReplaySample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub importance: f32,
    /// Monotone insertion counter, unique within one memory.
    pub inserted_at: u64,
}

/// Replay memory `R`: at most `capacity` samples at any observable point.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    capacity: usize,
    samples: Vec<ReplaySample>,
    class_counts: BTreeMap<usize, usize>,
    next_id: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig { detail: "replay capacity must be >= 1".into() });
        }
        Ok(ReplayMemory { capacity, samples: Vec::new(), class_counts: BTreeMap::new(), next_id: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ReplaySample] {
        &self.samples
    }

    pub fn class_count(&self, label: usize) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }

    /// Mean importance of the stored samples; 0 when empty.
    pub fn mean_importance(&self) -> f32 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|s| s.importance as f64).sum();
        (sum / self.samples.len() as f64) as f32
    }

    /// Inserts with importance initialized to the current memory mean, so a
    /// fresh sample is neither privileged nor instantly evicted. Returns the
    /// evicted sample when the insert overflows capacity.
    pub fn insert(&mut self, image: Tensor<f32>, label: usize) -> Option<ReplaySample> {
        let importance = self.mean_importance();
        self.insert_with_importance(image, label, importance)
    }

    /// Inserts with an explicit importance (used when restoring a saved
    /// memory). Applies one eviction if capacity is exceeded.
    pub fn insert_with_importance(
        &mut self,
        image: Tensor<f32>,
        label: usize,
        importance: f32,
    ) -> Option<ReplaySample> {
        let sample = ReplaySample { image, label, importance, inserted_at: self.next_id };
        self.next_id += 1;
        *self.class_counts.entry(label).or_insert(0) += 1;
        self.samples.push(sample);
        if self.samples.len() > self.capacity {
            Some(self.evict_least_important().expect("memory is nonempty"))
        } else {
            None
        }
    }

    /// Smooths each participating sample's importance toward its observed
    /// loss decrease: `imp <- (1-beta)*imp + beta*(before - after)`.
    pub fn importance_update(
        &mut self,
        indices: &[usize],
        loss_before: &[f32],
        loss_after: &[f32],
        beta: f32,
    ) -> Result<()> {
        if indices.len() != loss_before.len() || indices.len() != loss_after.len() {
            return Err(Error::Shape {
                op: "importance_update",
                detail: format!(
                    "{} indices vs {}/{} losses",
                    indices.len(),
                    loss_before.len(),
                    loss_after.len()
                ),
            });
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidConfig { detail: format!("beta must be in (0, 1], got {beta}") });
        }
        for &i in indices {
            if i >= self.samples.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.samples.len() });
            }
        }
        for (k, &i) in indices.iter().enumerate() {
            let s = &mut self.samples[i];
            s.importance = (1.0 - beta) * s.importance + beta * (loss_before[k] - loss_after[k]);
        }
        Ok(())
    }

    /// Removes the least important sample. Importance ties narrow to the
    /// class with the largest count, then to the oldest insertion.
    pub fn evict_least_important(&mut self) -> Result<ReplaySample> {
        let victim = self.eviction_victim()?;
        let sample = self.samples.remove(victim);
        let count = self.class_counts.get_mut(&sample.label).expect("counted class");
        *count -= 1;
        if *count == 0 {
            self.class_counts.remove(&sample.label);
        }
        Ok(sample)
    }

    fn eviction_victim(&self) -> Result<usize> {
        if self.samples.is_empty() {
            return Err(Error::Empty { what: "evict_least_important" });
        }
        let min_imp = self
            .samples
            .iter()
            .map(|s| s.importance)
            .fold(f32::INFINITY, f32::min);
        let candidates: Vec<usize> = (0..self.samples.len())
            .filter(|&i| self.samples[i].importance == min_imp)
            .collect();
        let max_count = candidates
            .iter()
            .map(|&i| self.class_count(self.samples[i].label))
            .max()
            .expect("nonempty candidates");
        candidates
            .into_iter()
            .filter(|&i| self.class_count(self.samples[i].label) == max_count)
            .min_by_key(|&i| self.samples[i].inserted_at)
            .ok_or(Error::Empty { what: "evict_least_important" })
    }

    /// Writes the stored images as a dataset file plus a sidecar importance
    /// table (`inserted_at,label,importance` CSV).
    pub fn save(&self, data_path: &Path, csv_path: &Path, num_classes: usize) -> Result<()> {
        use crate::stream::{store_dataset, Dataset, Split};
        if self.samples.is_empty() {
            return Err(Error::Empty { what: "replay save" });
        }
        let dims = self.samples[0].image.shape().to_vec();
        let mut data = Vec::new();
        let mut labels = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.image.shape() != dims {
                return Err(Error::Shape {
                    op: "replay save",
                    detail: format!("mixed image shapes {:?} vs {dims:?}", s.image.shape()),
                });
            }
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        let mut shape = vec![self.samples.len()];
        shape.extend_from_slice(&dims);
        let dataset = Dataset {
            images: Tensor::new(shape, data)?,
            labels,
            num_classes,
            split: Split::Train,
        };
        store_dataset(&dataset, data_path)?;

        let mut w = BufWriter::new(File::create(csv_path)?);
        writeln!(w, "inserted_at,label,importance")?;
        for s in &self.samples {
            writeln!(w, "{},{},{:.6}", s.inserted_at, s.label, s.importance)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ── SBD memory ───────────────────────────────────────────────────────

/// One stored boundary sample (a batch entry flattened to a single map).
#[derive(Clone, Debug)]
pub struct SbdEntry {
    /// `[w, h, d]` feature map.
    pub features: Tensor<f32>,
    pub label: usize,
    pub task_id: u32,
    pub importance: f32,
    pub inserted_at: u64,
}

/// SBD memory `E`: append-only across tasks, except for first-task
/// regeneration; an optional budget evicts importance minima.
#[derive(Clone, Debug)]
pub struct SbdMemory {
    entries: Vec<SbdEntry>,
    budget: Option<usize>,
    next_id: u64,
}

impl SbdMemory {
    pub fn new(budget: Option<usize>) -> Result<Self> {
        if budget == Some(0) {
            return Err(Error::InvalidConfig { detail: "sbd budget must be >= 1 when set".into() });
        }
        Ok(SbdMemory { entries: Vec::new(), budget, next_id: 0 })
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SbdEntry] {
        &self.entries
    }

    pub fn mean_importance(&self) -> f32 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.entries.iter().map(|e| e.importance as f64).sum();
        (sum / self.entries.len() as f64) as f32
    }

    /// Appends every sample of the batch as its own entry, then trims to
    /// the budget by evicting importance minima (oldest first on ties).
    /// Returns the number of evicted entries; unbounded mode never evicts.
    pub fn append(&mut self, batch: &SbdBatch) -> Result<usize> {
        let shape = batch.features.shape();
        if shape.len() != 4 {
            return Err(Error::Shape {
                op: "sbd_append",
                detail: format!("expected [B, w, h, d], got {shape:?}"),
            });
        }
        let b = shape[0];
        if batch.labels.len() != b {
            return Err(Error::Shape {
                op: "sbd_append",
                detail: format!("{b} feature rows vs {} labels", batch.labels.len()),
            });
        }
        let per_sample = [shape[1], shape[2], shape[3]];
        let initial = self.mean_importance();
        for i in 0..b {
            let row = batch.features.gather_rows(&[i])?.reshaped(&per_sample)?;
            self.entries.push(SbdEntry {
                features: row,
                label: batch.labels[i],
                task_id: batch.task_id,
                importance: initial,
                inserted_at: self.next_id,
            });
            self.next_id += 1;
        }
        Ok(self.trim_to_budget())
    }

    fn trim_to_budget(&mut self) -> usize {
        let Some(budget) = self.budget else { return 0 };
        if self.entries.len() <= budget {
            return 0;
        }
        let excess = self.entries.len() - budget;
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            let ea = &self.entries[a];
            let eb = &self.entries[b];
            ea.importance
                .partial_cmp(&eb.importance)
                .expect("importances are finite")
                .then(ea.inserted_at.cmp(&eb.inserted_at))
        });
        let mut evict = vec![false; self.entries.len()];
        for &i in order.iter().take(excess) {
            evict[i] = true;
        }
        let mut keep = Vec::with_capacity(budget);
        for (i, e) in self.entries.drain(..).enumerate() {
            if !evict[i] {
                keep.push(e);
            }
        }
        self.entries = keep;
        excess
    }

    /// Drops every entry of `task_id` and appends the regenerated batches.
    pub fn replace_task_entries(&mut self, task_id: u32, batches: &[SbdBatch]) -> Result<()> {
        for batch in batches {
            if batch.task_id != task_id {
                return Err(Error::InvalidConfig {
                    detail: format!(
                        "replace_task_entries({task_id}) got a batch tagged {}",
                        batch.task_id
                    ),
                });
            }
        }
        self.entries.retain(|e| e.task_id != task_id);
        for batch in batches {
            self.append(batch)?;
        }
        Ok(())
    }

    /// Same smoothing rule as the replay memory.
    pub fn importance_update(
        &mut self,
        indices: &[usize],
        loss_before: &[f32],
        loss_after: &[f32],
        beta: f32,
    ) -> Result<()> {
        if indices.len() != loss_before.len() || indices.len() != loss_after.len() {
            return Err(Error::Shape {
                op: "sbd importance_update",
                detail: format!(
                    "{} indices vs {}/{} losses",
                    indices.len(),
                    loss_before.len(),
                    loss_after.len()
                ),
            });
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidConfig { detail: format!("beta must be in (0, 1], got {beta}") });
        }
        for &i in indices {
            if i >= self.entries.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.entries.len() });
            }
        }
        for (k, &i) in indices.iter().enumerate() {
            let e = &mut self.entries[i];
            e.importance = (1.0 - beta) * e.importance + beta * (loss_before[k] - loss_after[k]);
        }
        Ok(())
    }

    /// Total stored feature elements (for byte accounting).
    pub fn feature_elements(&self) -> usize {
        self.entries.iter().map(|e| e.features.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(u32, u16, &Tensor<f32>)> = self
            .entries
            .iter()
            .map(|e| (e.task_id, e.label as u16, &e.features))
            .collect();
        save_sbd_store(path, &entries)
    }
}
