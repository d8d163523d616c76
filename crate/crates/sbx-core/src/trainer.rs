//! The task-stream training loop: per-batch sample selection into replay
//! memory, dual-model experience blending, first-task encoder fine-tuning,
//! and first-task regeneration of the stored boundary samples.
//!
//! Each blending step clones the deployed model `M` into two copies:
//! `M_{R∪E}` takes one SGD step on a replay batch (r-path) plus a boundary
//! batch (e-path), `M_E` takes one SGD step on a fresh boundary batch, and
//! the new `M` is the elementwise blend `(1-alpha)*M_{R∪E} + alpha*M_E`.
//! The encoder and attention layer train only during the first task, are
//! updated directly (never blended), and are frozen afterwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::write_checkpoint;
use crate::error::{Error, Result};
use crate::memory::{ReplayMemory, SbdMemory};
use crate::nets::{
    e_path_logits, r_path_logits, Encoder, Extractor, ModelState, NetConfig, SelfAttention,
};
use crate::optim::{sgd_step, GradMap};
use crate::sbd::{generate_sbd, NoiseConfig, SbdBatch};
use crate::stream::{Task, TaskBatch};
use crate::tape::{per_sample_cross_entropy, Tape};
use crate::tensor::Tensor;

/// Sub-seed salts for the trainer's independent generator streams.
pub const INIT_RNG_SALT: u64 = 0x01;
pub const TRAIN_RNG_SALT: u64 = 0x02;
pub const NOISE_RNG_SALT: u64 = 0x03;

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Blend weight of the boundary-only model.
    pub alpha: f64,
    pub lr: f32,
    pub epochs_per_task: usize,
    /// Draw size for replay and boundary batches.
    pub batch_size: usize,
    /// SGD steps per branch inside one blending step.
    pub inner_steps: usize,
    /// Noise-magnitude control for boundary-sample generation.
    pub lambda: f64,
    /// Importance smoothing factor.
    pub beta: f32,
    /// Held-out validation images per task.
    pub val_batch: usize,
    /// Per-channel noise scales instead of one global scale.
    pub per_channel_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            lr: 0.01,
            epochs_per_task: 10,
            batch_size: 128,
            inner_steps: 1,
            lambda: 0.005,
            beta: 0.1,
            val_batch: 128,
            per_channel_noise: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig { detail: format!("alpha must be in [0, 1], got {}", self.alpha) });
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig { detail: format!("lr must be positive, got {}", self.lr) });
        }
        if self.epochs_per_task == 0 || self.batch_size == 0 || self.inner_steps == 0 {
            return Err(Error::InvalidConfig {
                detail: "epochs_per_task, batch_size, and inner_steps must be >= 1".into(),
            });
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig { detail: format!("lambda must be positive, got {}", self.lambda) });
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidConfig { detail: format!("beta must be in (0, 1], got {}", self.beta) });
        }
        Ok(())
    }
}

/// Pipeline selector: the full method or one of its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Replay + boundary samples + dual-model blending.
    Full,
    /// First-task fine-tuning plus replay training, no boundary data.
    ReplayOnly,
    /// First-task fine-tuning only; trains directly on the stream batches.
    FtfOnly,
}

/// Held-out images used for validation accuracy, never trained on.
#[derive(Clone, Debug)]
pub struct ValSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Reserves leading batches of a task as a held-out validation pool of
/// roughly `target` images (capped at half the task) and returns the
/// remaining batches for training.
pub fn split_validation(task: &Task, target: usize) -> (Option<ValSet>, Vec<TaskBatch>) {
    let total = task.sample_count();
    let eff = target.min(total / 2);
    if eff == 0 {
        return (None, task.batches.clone());
    }
    let mut reserved = 0usize;
    let mut boundary = 0usize;
    for (i, batch) in task.batches.iter().enumerate() {
        reserved += batch.labels.len();
        boundary = i + 1;
        if reserved >= eff {
            break;
        }
    }
    let val_batches = &task.batches[..boundary];
    let image_refs: Vec<&Tensor<f32>> = val_batches.iter().map(|b| &b.images).collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (b, images) in val_batches.iter().zip(&image_refs) {
        data.extend_from_slice(images.data());
        labels.extend_from_slice(&b.labels);
    }
    let mut shape = val_batches[0].images.shape().to_vec();
    shape[0] = labels.len();
    let images = Tensor::new(shape, data).expect("validation stack matches shape");
    (Some(ValSet { images, labels }), task.batches[boundary..].to_vec())
}

/// Affine parameter blend `(1-alpha)*ma + alpha*mb` over the model `M`.
pub fn blend(ma: &ModelState<f32>, mb: &ModelState<f32>, alpha: f64) -> Result<ModelState<f32>> {
    ma.blend(mb, alpha)
}

/// Per-sample r-path losses (images -> encoder -> attention -> classifier).
pub fn r_path_losses(
    encoder: &Encoder<f32>,
    sa: &SelfAttention<f32>,
    model: &ModelState<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<Vec<f32>> {
    let logits = r_path_logits(encoder, sa, model, images)?;
    per_sample_cross_entropy(&logits, labels)
}

/// Per-sample e-path losses (stored features -> extractor -> classifier).
pub fn e_path_losses(
    extractor: &Extractor<f32>,
    model: &ModelState<f32>,
    features: &Tensor<f32>,
    labels: &[usize],
) -> Result<Vec<f32>> {
    let logits = e_path_logits(extractor, model, features)?;
    per_sample_cross_entropy(&logits, labels)
}

/// Mutable training state: parameters, memories, and generator streams.
pub struct Trainer {
    pub encoder: Encoder<f32>,
    pub sa: SelfAttention<f32>,
    pub extractor: Extractor<f32>,
    pub model: ModelState<f32>,
    pub replay: ReplayMemory,
    pub sbd: SbdMemory,
    pub task_index: usize,
    /// Completed (non-skipped) training steps.
    pub step: u64,
    /// Steps skipped because a required memory was empty.
    pub skipped_steps: u64,
    encoder_frozen: bool,
    first_task_cache: Vec<TaskBatch>,
    rng_train: ChaCha8Rng,
    rng_noise: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        net_cfg: &NetConfig,
        replay_capacity: usize,
        sbd_budget: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        net_cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, INIT_RNG_SALT));
        let encoder = Encoder::new(net_cfg, &mut init_rng);
        let sa = SelfAttention::new(net_cfg, &mut init_rng);
        let extractor = Extractor::new(net_cfg, &mut init_rng);
        let model = ModelState::new(net_cfg, &mut init_rng);
        Ok(Trainer {
            encoder,
            sa,
            extractor,
            model,
            replay: ReplayMemory::new(replay_capacity)?,
            sbd: SbdMemory::new(sbd_budget)?,
            task_index: 0,
            step: 0,
            skipped_steps: 0,
            encoder_frozen: false,
            first_task_cache: Vec::new(),
            rng_train: ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, TRAIN_RNG_SALT)),
            rng_noise: ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, NOISE_RNG_SALT)),
        })
    }

    pub fn encoder_trainable(&self) -> bool {
        !self.encoder_frozen
    }

    /// Marks the encoder and attention layer as fixed, as happens at the
    /// end of the first task.
    pub fn freeze_encoder(&mut self) {
        self.encoder_frozen = true;
    }

    /// Raw batches retained for first-task regeneration; empty after task 0.
    pub fn first_task_cache_len(&self) -> usize {
        self.first_task_cache.len()
    }

    /// All parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut params = self.encoder.named_params();
        params.extend(self.sa.named_params());
        params.extend(self.extractor.named_params());
        params.extend(self.model.named_params());
        params
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        write_checkpoint(path, &self.named_params())
    }

    /// Runs one task: boundary generation up front, then per-epoch batch
    /// sweeps. `on_epoch_end(trainer, epoch)` fires after each epoch.
    /// The caller passes training batches only (validation already split
    /// off); at the end of task 0 the encoder freezes and the raw cache is
    /// dropped.
    pub fn train_task<CB: FnMut(&Trainer, usize)>(
        &mut self,
        train_batches: &[TaskBatch],
        cfg: &TrainConfig,
        baseline: Baseline,
        mut on_epoch_end: CB,
    ) -> Result<()> {
        cfg.validate()?;
        let task_id = self.task_index as u32;

        if baseline == Baseline::Full {
            for batch in train_batches {
                let sbd_batch = self.generate_batch_sbd(batch, task_id, 0, cfg)?;
                self.sbd.append(&sbd_batch)?;
            }
            if self.task_index == 0 {
                self.first_task_cache = train_batches.to_vec();
            }
        }

        for epoch in 0..cfg.epochs_per_task {
            for batch in train_batches {
                match baseline {
                    Baseline::Full => {
                        self.insert_batch(batch)?;
                        self.experience_blending_step(cfg)?;
                    }
                    Baseline::ReplayOnly => {
                        self.insert_batch(batch)?;
                        self.replay_step(cfg)?;
                    }
                    Baseline::FtfOnly => {
                        self.direct_step(batch, cfg)?;
                    }
                }
            }
            if baseline == Baseline::Full && self.task_index == 0 {
                self.regenerate_first_task_sbd(epoch as u32 + 1, cfg)?;
            }
            on_epoch_end(self, epoch);
        }

        if self.task_index == 0 {
            self.freeze_encoder();
            self.first_task_cache.clear();
        }
        self.task_index += 1;
        Ok(())
    }

    fn generate_batch_sbd(
        &mut self,
        batch: &TaskBatch,
        task_id: u32,
        epoch_tag: u32,
        cfg: &TrainConfig,
    ) -> Result<SbdBatch> {
        let noise = NoiseConfig {
            lambda: cfg.lambda,
            rng_seed: self.rng_noise.gen(),
            per_channel: cfg.per_channel_noise,
        };
        generate_sbd(&self.encoder, &self.sa, &batch.images, &batch.labels, task_id, epoch_tag, &noise)
    }

    fn regenerate_first_task_sbd(&mut self, epoch_tag: u32, cfg: &TrainConfig) -> Result<()> {
        let cached = std::mem::take(&mut self.first_task_cache);
        let mut batches = Vec::with_capacity(cached.len());
        for batch in &cached {
            batches.push(self.generate_batch_sbd(batch, 0, epoch_tag, cfg)?);
        }
        self.first_task_cache = cached;
        self.sbd.replace_task_entries(0, &batches)
    }

    fn insert_batch(&mut self, batch: &TaskBatch) -> Result<()> {
        for (i, &label) in batch.labels.iter().enumerate() {
            let image = batch.images.row(i)?;
            self.replay.insert(image, label);
        }
        Ok(())
    }

    fn draw_indices(&mut self, len: usize, batch: usize) -> Vec<usize> {
        let k = batch.min(len);
        (0..k).map(|_| self.rng_train.gen_range(0..len)).collect()
    }

    fn materialize_replay(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let refs: Vec<&Tensor<f32>> =
            indices.iter().map(|&i| &self.replay.samples()[i].image).collect();
        let images = Tensor::stack(&refs)?;
        let labels = indices.iter().map(|&i| self.replay.samples()[i].label).collect();
        Ok((images, labels))
    }

    fn materialize_sbd(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let refs: Vec<&Tensor<f32>> =
            indices.iter().map(|&i| &self.sbd.entries()[i].features).collect();
        let features = Tensor::stack(&refs)?;
        let labels = indices.iter().map(|&i| self.sbd.entries()[i].label).collect();
        Ok((features, labels))
    }

    /// One experience-blending step. Skips (with a recorded warning count)
    /// when either memory is still empty. Returns whether a step ran.
    pub fn experience_blending_step(&mut self, cfg: &TrainConfig) -> Result<bool> {
        if self.replay.is_empty() || self.sbd.is_empty() {
            self.skipped_steps += 1;
            return Ok(false);
        }
        let mut m_rue = self.model.clone();
        let mut ex_rue = self.extractor.clone();
        let mut m_e = self.model.clone();
        let mut ex_e = self.extractor.clone();

        let mut r_drawn = Vec::new();
        let mut r_before = Vec::new();
        let mut e_drawn = Vec::new();
        let mut e_before = Vec::new();

        for _ in 0..cfg.inner_steps {
            let r_idx = self.draw_indices(self.replay.len(), cfg.batch_size);
            let (r_images, r_labels) = self.materialize_replay(&r_idx)?;
            let e_idx = self.draw_indices(self.sbd.len(), cfg.batch_size);
            let (e_feats, e_labels) = self.materialize_sbd(&e_idx)?;

            r_before.extend(r_path_losses(&self.encoder, &self.sa, &self.model, &r_images, &r_labels)?);
            e_before.extend(e_path_losses(&self.extractor, &self.model, &e_feats, &e_labels)?);
            r_drawn.extend_from_slice(&r_idx);
            e_drawn.extend_from_slice(&e_idx);

            // Branch a: M_{R∪E} trains on replay (r-path) plus boundary
            // samples (e-path); encoder/SA gradients apply directly while
            // they are still trainable.
            let enc_trainable = !self.encoder_frozen;
            {
                let mut tape = Tape::new();
                let x = tape.constant(r_images)?;
                let enc_vars = self.encoder.bind(&mut tape, enc_trainable)?;
                let sa_vars = self.sa.bind(&mut tape, enc_trainable)?;
                let m_vars = m_rue.bind(&mut tape, true)?;
                let ex_vars = ex_rue.bind(&mut tape, true)?;
                let f = enc_vars.forward(&mut tape, x)?;
                let fp = sa_vars.forward(&mut tape, f)?;
                let r_logits = m_vars.classify_r_path(&mut tape, fp)?;
                let ce_r = tape.cross_entropy(r_logits, &r_labels)?;
                let e_in = tape.constant(e_feats)?;
                let e_logits = m_vars.classify_e_path(&mut tape, &ex_vars, e_in)?;
                let ce_e = tape.cross_entropy(e_logits, &e_labels)?;
                let loss = tape.add(ce_r, ce_e)?;
                let grads = tape.backward(loss)?;

                let mut gm = GradMap::new();
                m_vars.collect_grads(&grads, &mut gm)?;
                ex_vars.collect_grads(&grads, &mut gm)?;
                let mut params = m_rue.named_params_mut();
                params.extend(ex_rue.named_params_mut());
                sgd_step(&mut params, &gm, cfg.lr)?;

                if enc_trainable {
                    let mut enc_gm = GradMap::new();
                    enc_vars.collect_grads(&grads, &mut enc_gm)?;
                    sa_vars.collect_grads(&grads, &mut enc_gm)?;
                    let mut enc_params = self.encoder.named_params_mut();
                    enc_params.extend(self.sa.named_params_mut());
                    sgd_step(&mut enc_params, &enc_gm, cfg.lr)?;
                }
            }

            // Branch b: M_E trains on a fresh boundary batch only.
            let e2_idx = self.draw_indices(self.sbd.len(), cfg.batch_size);
            let (e2_feats, e2_labels) = self.materialize_sbd(&e2_idx)?;
            {
                let mut tape = Tape::new();
                let m_vars = m_e.bind(&mut tape, true)?;
                let ex_vars = ex_e.bind(&mut tape, true)?;
                let e_in = tape.constant(e2_feats)?;
                let logits = m_vars.classify_e_path(&mut tape, &ex_vars, e_in)?;
                let loss = tape.cross_entropy(logits, &e2_labels)?;
                let grads = tape.backward(loss)?;

                let mut gm = GradMap::new();
                m_vars.collect_grads(&grads, &mut gm)?;
                ex_vars.collect_grads(&grads, &mut gm)?;
                let mut params = m_e.named_params_mut();
                params.extend(ex_e.named_params_mut());
                sgd_step(&mut params, &gm, cfg.lr)?;
            }
        }

        self.model = blend(&m_rue, &m_e, cfg.alpha)?;
        self.extractor = ex_rue.blend(&ex_e, cfg.alpha)?;

        let (r_images, r_labels) = self.materialize_replay(&r_drawn)?;
        let r_after = r_path_losses(&self.encoder, &self.sa, &self.model, &r_images, &r_labels)?;
        self.replay.importance_update(&r_drawn, &r_before, &r_after, cfg.beta)?;

        let (e_feats, e_labels) = self.materialize_sbd(&e_drawn)?;
        let e_after = e_path_losses(&self.extractor, &self.model, &e_feats, &e_labels)?;
        self.sbd.importance_update(&e_drawn, &e_before, &e_after, cfg.beta)?;

        self.step += 1;
        Ok(true)
    }

    /// Replay-only ablation step: cross-entropy on a replay draw, no
    /// boundary data and no blending.
    fn replay_step(&mut self, cfg: &TrainConfig) -> Result<bool> {
        if self.replay.is_empty() {
            self.skipped_steps += 1;
            return Ok(false);
        }
        let r_idx = self.draw_indices(self.replay.len(), cfg.batch_size);
        let (r_images, r_labels) = self.materialize_replay(&r_idx)?;
        let r_before = r_path_losses(&self.encoder, &self.sa, &self.model, &r_images, &r_labels)?;

        self.supervised_step(&r_images, &r_labels, cfg)?;

        let r_after = r_path_losses(&self.encoder, &self.sa, &self.model, &r_images, &r_labels)?;
        self.replay.importance_update(&r_idx, &r_before, &r_after, cfg.beta)?;
        self.step += 1;
        Ok(true)
    }

    /// Fine-tuning ablation step: trains directly on the stream batch.
    fn direct_step(&mut self, batch: &TaskBatch, cfg: &TrainConfig) -> Result<bool> {
        self.supervised_step(&batch.images, &batch.labels, cfg)?;
        self.step += 1;
        Ok(true)
    }

    fn supervised_step(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        cfg: &TrainConfig,
    ) -> Result<()> {
        let enc_trainable = !self.encoder_frozen;
        let mut tape = Tape::new();
        let x = tape.constant(images.clone())?;
        let enc_vars = self.encoder.bind(&mut tape, enc_trainable)?;
        let sa_vars = self.sa.bind(&mut tape, enc_trainable)?;
        let m_vars = self.model.bind(&mut tape, true)?;
        let f = enc_vars.forward(&mut tape, x)?;
        let fp = sa_vars.forward(&mut tape, f)?;
        let logits = m_vars.classify_r_path(&mut tape, fp)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;

        let mut gm = GradMap::new();
        m_vars.collect_grads(&grads, &mut gm)?;
        sgd_step(&mut self.model.named_params_mut(), &gm, cfg.lr)?;

        if enc_trainable {
            let mut enc_gm = GradMap::new();
            enc_vars.collect_grads(&grads, &mut enc_gm)?;
            sa_vars.collect_grads(&grads, &mut enc_gm)?;
            let mut enc_params = self.encoder.named_params_mut();
            enc_params.extend(self.sa.named_params_mut());
            sgd_step(&mut enc_params, &enc_gm, cfg.lr)?;
        }
        Ok(())
    }
}
