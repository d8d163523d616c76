//! Seeded multi-run orchestration: build data and stream, train through the
//! task sequence, record per-epoch accuracies, checkpoints, and budget
//! numbers, then aggregate across seeds.
//!
//! Everything written under a seed directory is a pure function of the
//! resolved config and seed; wall-clock metadata lives in a separate file
//! at the run root.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};

use sbx_core::eval::{self, EvalSplit};
use sbx_core::mix_seed;
use sbx_core::nets::NetConfig;
use sbx_core::stream::{gen_synthetic, iblurry_split, load_dataset, Dataset, Split, SyntheticSpec};
use sbx_core::trainer::{split_validation, Baseline, Trainer, ValSet};

use crate::config::{baseline_name, parse_baseline, DatasetSource, ExperimentConfig};
use crate::records::{self, Row};

/// Salt for the per-seed stream split generator.
pub const SPLIT_SALT: u64 = 0x10;

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub a_avg: f64,
    pub a_fin: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub baseline: Baseline,
    pub summaries: Vec<SeedSummary>,
}

/// Applies CLI overrides onto a loaded config.
pub fn resolve_config(
    base: &ExperimentConfig,
    baseline_override: Option<&str>,
    seeds_override: Option<Vec<u64>>,
    out_override: Option<PathBuf>,
) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = base.clone();
    if let Some(b) = baseline_override {
        cfg.baseline = b.to_string();
    }
    if let Some(seeds) = seeds_override {
        cfg.seeds = seeds;
    }
    if let Some(out) = out_override {
        cfg.out_dir = out;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output root: the env override applies to relative out dirs.
pub fn resolve_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    if cfg.out_dir.is_absolute() {
        return cfg.out_dir.clone();
    }
    match std::env::var_os("SBX_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(&cfg.out_dir),
        None => cfg.out_dir.clone(),
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn build_datasets(cfg: &ExperimentConfig) -> anyhow::Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSource::Synthetic(s) => {
            let train_spec = SyntheticSpec {
                num_classes: s.num_classes,
                samples_per_class: s.samples_per_class,
                height: s.height,
                width: s.width,
                noise_std: s.noise_std,
            };
            let test_spec =
                SyntheticSpec { samples_per_class: s.test_samples_per_class, ..train_spec.clone() };
            let train = gen_synthetic(&train_spec, s.data_seed, Split::Train)?;
            let test = gen_synthetic(&test_spec, s.data_seed, Split::Test)?;
            Ok((train, test))
        }
        DatasetSource::Files(f) => {
            let train = load_dataset(&f.train, Split::Train)?;
            let test = load_dataset(&f.test, Split::Test)?;
            if train.num_classes != test.num_classes {
                bail!(
                    "dataset.files: class counts differ (train {}, test {})",
                    train.num_classes,
                    test.num_classes
                );
            }
            Ok((train, test))
        }
    }
}

fn net_config_for(cfg: &ExperimentConfig, train: &Dataset) -> anyhow::Result<NetConfig> {
    let mut net = cfg.net_config()?;
    let (h, w, c) = train.image_dims();
    net.input_h = h;
    net.input_w = w;
    net.input_c = c;
    net.num_classes = train.num_classes;
    net.validate().map_err(|e| anyhow::anyhow!("model: {e}"))?;
    Ok(net)
}

fn accuracy_row(
    seed: u64,
    task: usize,
    epoch: usize,
    step: u64,
    split: EvalSplit,
    value: f64,
) -> Row {
    Row {
        seed,
        task,
        epoch,
        step,
        split: split.as_str().to_string(),
        metric: "accuracy".into(),
        value,
    }
}

fn summary_row(seed: u64, task: usize, epoch: usize, step: u64, metric: &str, value: f64) -> Row {
    Row { seed, task, epoch, step, split: "summary".into(), metric: metric.into(), value }
}

fn val_accuracy(trainer: &Trainer, val: &ValSet) -> anyhow::Result<f64> {
    let logits =
        sbx_core::nets::r_path_logits(&trainer.encoder, &trainer.sa, &trainer.model, &val.images)?;
    Ok(eval::accuracy_from_logits(&logits, &val.labels)?)
}

fn run_seed(
    cfg: &ExperimentConfig,
    baseline: Baseline,
    seed: u64,
    seed_dir: &Path,
) -> anyhow::Result<SeedSummary> {
    std::fs::create_dir_all(seed_dir)?;
    let (train, test) = build_datasets(cfg)?;
    let net_cfg = net_config_for(cfg, &train)?;
    let stream = iblurry_split(
        &train,
        cfg.stream.tasks,
        cfg.stream.disjoint_percent,
        cfg.stream.blurry_percent,
        cfg.stream.batch_size,
        mix_seed(seed, SPLIT_SALT),
    )?;
    let train_cfg = cfg.train_config();
    let mut trainer = Trainer::new(&net_cfg, cfg.memory.replay_capacity, cfg.memory.sbd_budget, seed)?;

    let mut rows: Vec<Row> = Vec::new();
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut task0_val: Option<ValSet> = None;
    let mut task_accuracies: Vec<f64> = Vec::new();
    let epochs = train_cfg.epochs_per_task;

    for (task_idx, task) in stream.tasks.iter().enumerate() {
        let (val, train_batches) = split_validation(task, train_cfg.val_batch);
        if task_idx == 0 {
            task0_val = val.clone();
        }
        for batch in &train_batches {
            seen.extend(batch.labels.iter().copied());
        }

        let mut epoch_rows: Vec<Row> = Vec::new();
        {
            let seen_ref = &seen;
            let task0_ref = &task0_val;
            let val_ref = &val;
            let test_ref = &test;
            let rows_ref = &mut epoch_rows;
            trainer.train_task(&train_batches, &train_cfg, baseline, |tr, epoch| {
                let step = tr.step;
                if let Some(v) = val_ref {
                    if let Ok(acc) = val_accuracy(tr, v) {
                        rows_ref.push(accuracy_row(
                            seed,
                            task_idx,
                            epoch,
                            step,
                            EvalSplit::ValidationCurrent,
                            acc,
                        ));
                    }
                }
                if let Some(v0) = task0_ref {
                    if let Ok(acc) = val_accuracy(tr, v0) {
                        rows_ref.push(accuracy_row(
                            seed,
                            task_idx,
                            epoch,
                            step,
                            EvalSplit::ValidationTask0,
                            acc,
                        ));
                    }
                }
                if let Ok(acc) = eval::evaluate(
                    &tr.encoder,
                    &tr.sa,
                    &tr.model,
                    &test_ref.images,
                    &test_ref.labels,
                    seen_ref,
                    EVAL_CHUNK,
                ) {
                    rows_ref.push(accuracy_row(
                        seed,
                        task_idx,
                        epoch,
                        step,
                        EvalSplit::TestSeen,
                        acc,
                    ));
                }
            })?;
        }
        rows.extend(epoch_rows);

        let a_i = eval::evaluate(
            &trainer.encoder,
            &trainer.sa,
            &trainer.model,
            &test.images,
            &test.labels,
            &seen,
            EVAL_CHUNK,
        )?;
        task_accuracies.push(a_i);
        rows.push(Row {
            seed,
            task: task_idx,
            epoch: epochs - 1,
            step: trainer.step,
            split: EvalSplit::TestSeen.as_str().into(),
            metric: "task_accuracy".into(),
            value: a_i,
        });
        trainer
            .save_checkpoint(&seed_dir.join(format!("task{task_idx}.sbxm")))
            .with_context(|| format!("checkpoint for task {task_idx}"))?;
        if std::env::var_os("SBX_DEBUG_MEMORY").is_some() {
            let mut counts = std::collections::BTreeMap::new();
            for s in trainer.replay.samples() {
                *counts.entry(s.label).or_insert(0usize) += 1;
            }
            let imps: Vec<f32> = trainer.replay.samples().iter().map(|s| s.importance).collect();
            let (mn, mx) = imps.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| {
                (a.min(*v), b.max(*v))
            });
            eprintln!("[debug] seed {seed} task {task_idx} a_i {a_i:.3}: replay classes {counts:?} imp {mn:.4}..{mx:.4}");
        }
    }

    let a_avg = eval::a_avg(&task_accuracies)?;
    let a_fin = *task_accuracies.last().expect("at least one task");
    let budget = eval::budget_report(&trainer.replay, &trainer.sbd);
    let last_task = stream.tasks.len() - 1;
    let step = trainer.step;
    rows.push(summary_row(seed, last_task, epochs - 1, step, "a_avg", a_avg));
    rows.push(summary_row(seed, last_task, epochs - 1, step, "a_fin", a_fin));
    rows.push(summary_row(seed, last_task, epochs - 1, step, "replay_bytes", budget.replay_bytes as f64));
    rows.push(summary_row(seed, last_task, epochs - 1, step, "sbd_bytes", budget.sbd_bytes as f64));
    rows.push(summary_row(
        seed,
        last_task,
        epochs - 1,
        step,
        "total_bytes",
        budget.total_bytes() as f64,
    ));
    rows.push(summary_row(
        seed,
        last_task,
        epochs - 1,
        step,
        "skipped_steps",
        trainer.skipped_steps as f64,
    ));

    records::write_file(&seed_dir.join("records.csv"), &rows)?;
    std::fs::write(seed_dir.join("done"), "ok\n")?;
    Ok(SeedSummary { seed, a_avg, a_fin })
}

fn summary_from_records(seed: u64, path: &Path) -> anyhow::Result<SeedSummary> {
    let rows = records::parse_file(path)?;
    let find = |metric: &str| -> anyhow::Result<f64> {
        rows.iter()
            .rev()
            .find(|r| r.metric == metric)
            .map(|r| r.value)
            .ok_or_else(|| anyhow::anyhow!("{}: no {metric} row", path.display()))
    };
    Ok(SeedSummary { seed, a_avg: find("a_avg")?, a_fin: find("a_fin")? })
}

fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every seed (skipping completed ones), then writes the cross-seed
/// summary. Returns the per-seed results.
pub fn run(
    base: &ExperimentConfig,
    baseline_override: Option<&str>,
    seeds_override: Option<Vec<u64>>,
    out_override: Option<PathBuf>,
) -> anyhow::Result<RunOutcome> {
    let cfg = resolve_config(base, baseline_override, seeds_override, out_override)?;
    let baseline = parse_baseline(&cfg.baseline)?;
    let out_dir = resolve_out_dir(&cfg);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    // Echo the resolved config so the run directory is self-describing.
    let config_json = serde_json::to_string_pretty(&cfg)?;
    std::fs::write(out_dir.join("config.json"), config_json + "\n")?;

    let started = unix_now();
    let mut summaries = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let seed_dir = out_dir.join(format!("seed{seed}"));
        let summary = if seed_dir.join("done").exists() {
            summary_from_records(seed, &seed_dir.join("records.csv"))
                .with_context(|| format!("resuming seed {seed}"))?
        } else {
            run_seed(&cfg, baseline, seed, &seed_dir)
                .with_context(|| format!("running seed {seed}"))?
        };
        summaries.push(summary);
    }

    let (avg_mean, avg_sd) = mean_stdev(&summaries.iter().map(|s| s.a_avg).collect::<Vec<_>>());
    let (fin_mean, fin_sd) = mean_stdev(&summaries.iter().map(|s| s.a_fin).collect::<Vec<_>>());
    let mut summary = String::from("metric,mean,stdev\n");
    summary.push_str(&format!("a_avg,{avg_mean:.6},{avg_sd:.6}\n"));
    summary.push_str(&format!("a_fin,{fin_mean:.6},{fin_sd:.6}\n"));
    std::fs::write(out_dir.join("summary.csv"), summary)?;

    let metadata = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "baseline": baseline_name(baseline),
        "seeds": cfg.seeds,
        "started_unix": started,
        "finished_unix": unix_now(),
    });
    std::fs::write(out_dir.join("metadata.json"), serde_json::to_string_pretty(&metadata)? + "\n")?;

    Ok(RunOutcome { out_dir, baseline, summaries })
}
