//! Experiment configuration: a single JSON file with nested sections.
//! Every field has a default, so a minimal config can be `{}`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use sbx_core::nets::{ExtractorKind, NetConfig};
use sbx_core::trainer::{Baseline, TrainConfig};

/// Where the labeled data comes from.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Procedurally generated class-conditional images.
    Synthetic(SyntheticConfig),
    /// Pre-existing dataset files.
    Files(FilesConfig),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    /// Generation seed; the dataset is shared by every run seed.
    pub data_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 10,
            samples_per_class: 200,
            test_samples_per_class: 30,
            height: 16,
            width: 16,
            noise_std: 0.1,
            data_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FilesConfig {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub tasks: usize,
    /// i-Blurry `n`: percent of classes that are disjoint.
    pub disjoint_percent: u32,
    /// i-Blurry `m`: percent of a blurry class leaking off its major task.
    pub blurry_percent: u32,
    pub batch_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig { tasks: 5, disjoint_percent: 50, blurry_percent: 10, batch_size: 128 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv1_channels: usize,
    pub feature_channels: usize,
    pub hidden: usize,
    /// "identity" or "conv1x1".
    pub extractor: String,
    pub sa_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv1_channels: 8,
            feature_channels: 16,
            hidden: 64,
            extractor: "identity".into(),
            sa_residual: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: f64,
    pub lr: f32,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub lambda: f64,
    pub beta: f32,
    pub val_batch: usize,
    pub per_channel_noise: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            alpha: d.alpha,
            lr: d.lr,
            epochs_per_task: d.epochs_per_task,
            batch_size: d.batch_size,
            inner_steps: d.inner_steps,
            lambda: d.lambda,
            beta: d.beta,
            val_batch: d.val_batch,
            per_channel_noise: d.per_channel_noise,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub replay_capacity: usize,
    /// `null` means unbounded.
    pub sbd_budget: Option<usize>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { replay_capacity: 500, sbd_budget: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub memory: MemoryConfig,
    /// "ours", "replay-only", or "ftf-only".
    pub baseline: String,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SyntheticConfig::default()),
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            memory: MemoryConfig::default(),
            baseline: "ours".into(),
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("runs/experiment"),
        }
    }
}

pub fn parse_baseline(s: &str) -> anyhow::Result<Baseline> {
    match s {
        "ours" => Ok(Baseline::Full),
        "replay-only" => Ok(Baseline::ReplayOnly),
        "ftf-only" => Ok(Baseline::FtfOnly),
        other => bail!("baseline: expected ours | replay-only | ftf-only, got {other:?}"),
    }
}

pub fn baseline_name(b: Baseline) -> &'static str {
    match b {
        Baseline::Full => "ours",
        Baseline::ReplayOnly => "replay-only",
        Baseline::FtfOnly => "ftf-only",
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds: must list at least one seed");
        }
        parse_baseline(&self.baseline)?;
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                if s.num_classes == 0 || s.samples_per_class == 0 || s.test_samples_per_class == 0 {
                    bail!("dataset.synthetic: counts must be positive");
                }
                if s.height == 0 || s.width == 0 {
                    bail!("dataset.synthetic: image dimensions must be positive");
                }
                if s.noise_std < 0.0 {
                    bail!("dataset.synthetic.noise_std: must be nonnegative");
                }
            }
            DatasetSource::Files(f) => {
                for (field, p) in [("dataset.files.train", &f.train), ("dataset.files.test", &f.test)] {
                    if !p.exists() {
                        bail!("{field}: path {} does not exist", p.display());
                    }
                }
            }
        }
        if self.stream.tasks == 0 {
            bail!("stream.tasks: must be >= 1");
        }
        if self.stream.disjoint_percent > 100 || self.stream.blurry_percent > 100 {
            bail!("stream: disjoint_percent and blurry_percent are percentages (0..=100)");
        }
        if self.stream.batch_size == 0 {
            bail!("stream.batch_size: must be >= 1");
        }
        self.extractor_kind()?;
        self.net_config()?
            .validate()
            .map_err(|e| anyhow::anyhow!("model: {e}"))?;
        self.train_config()
            .validate()
            .map_err(|e| anyhow::anyhow!("train: {e}"))?;
        if self.memory.replay_capacity == 0 {
            bail!("memory.replay_capacity: must be >= 1");
        }
        if self.memory.sbd_budget == Some(0) {
            bail!("memory.sbd_budget: must be >= 1 when set");
        }
        Ok(())
    }

    pub fn extractor_kind(&self) -> anyhow::Result<ExtractorKind> {
        match self.model.extractor.as_str() {
            "identity" => Ok(ExtractorKind::Identity),
            "conv1x1" => Ok(ExtractorKind::Conv1x1),
            other => bail!("model.extractor: expected identity | conv1x1, got {other:?}"),
        }
    }

    /// Image dimensions come from the dataset source; for files they are
    /// filled in after loading.
    pub fn net_config(&self) -> anyhow::Result<NetConfig> {
        let (h, w, num_classes) = match &self.dataset {
            DatasetSource::Synthetic(s) => (s.height, s.width, s.num_classes),
            // placeholder dims; the runner overrides from the loaded file
            DatasetSource::Files(_) => (16, 16, 10),
        };
        Ok(NetConfig {
            input_h: h,
            input_w: w,
            input_c: 1,
            conv1_channels: self.model.conv1_channels,
            feature_channels: self.model.feature_channels,
            hidden: self.model.hidden,
            num_classes,
            extractor: self.extractor_kind()?,
            sa_residual: self.model.sa_residual,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.train.alpha,
            lr: self.train.lr,
            epochs_per_task: self.train.epochs_per_task,
            batch_size: self.train.batch_size,
            inner_steps: self.train.inner_steps,
            lambda: self.train.lambda,
            beta: self.train.beta,
            val_batch: self.train.val_batch,
            per_channel_noise: self.train.per_channel_noise,
        }
    }
}
