use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Deserialize;

use sbx_cli::config::{baseline_name, ExperimentConfig};
use sbx_cli::{plot, runner};
use sbx_core::stream::{
    gen_synthetic, iblurry_split, load_dataset, store_dataset, Dataset, Split, SyntheticSpec,
};
use sbx_core::Tensor;

#[derive(Parser)]
#[command(name = "sbx", about = "Continual-learning experiments with synthetic boundary data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment over its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// ours | replay-only | ftf-only (overrides the config).
        #[arg(long)]
        baseline: Option<String>,
        /// Comma-separated seed list (overrides the config).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic train/test dataset files.
    GenData {
        /// JSON generation spec.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for train.sbds and test.sbds.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset file into an i-Blurry task stream.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tasks: usize,
        /// Percent of classes that are disjoint.
        #[arg(long)]
        n: u32,
        /// Blurry leakage percent.
        #[arg(long)]
        m: u32,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render accuracy curves from a records CSV to SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataSpec {
    num_classes: usize,
    samples_per_class: usize,
    test_samples_per_class: usize,
    #[serde(default = "default_dim")]
    height: usize,
    #[serde(default = "default_dim")]
    width: usize,
    #[serde(default = "default_noise")]
    noise_std: f64,
    #[serde(default = "default_seed")]
    seed: u64,
}

fn default_dim() -> usize {
    16
}
fn default_noise() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    1
}

fn cmd_gen_data(spec_path: &PathBuf, out: &PathBuf) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading spec {}", spec_path.display()))?;
    let spec: GenDataSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing spec {}", spec_path.display()))?;
    std::fs::create_dir_all(out)?;

    let train_spec = SyntheticSpec {
        num_classes: spec.num_classes,
        samples_per_class: spec.samples_per_class,
        height: spec.height,
        width: spec.width,
        noise_std: spec.noise_std,
    };
    let test_spec =
        SyntheticSpec { samples_per_class: spec.test_samples_per_class, ..train_spec.clone() };
    let train = gen_synthetic(&train_spec, spec.seed, Split::Train)?;
    let test = gen_synthetic(&test_spec, spec.seed, Split::Test)?;
    let train_path = out.join("train.sbds");
    let test_path = out.join("test.sbds");
    store_dataset(&train, &train_path)?;
    store_dataset(&test, &test_path)?;
    println!("wrote {} ({} samples)", train_path.display(), train.len());
    println!("wrote {} ({} samples)", test_path.display(), test.len());
    Ok(())
}

fn cmd_split(
    data: &PathBuf,
    tasks: usize,
    n: u32,
    m: u32,
    batch_size: usize,
    seed: u64,
    out: &PathBuf,
) -> anyhow::Result<()> {
    let dataset = load_dataset(data, Split::Train)?;
    let stream = iblurry_split(&dataset, tasks, n, m, batch_size, seed)?;
    std::fs::create_dir_all(out)?;

    let mut task_files = Vec::new();
    for (i, task) in stream.tasks.iter().enumerate() {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for batch in &task.batches {
            data.extend_from_slice(batch.images.data());
            labels.extend_from_slice(&batch.labels);
        }
        let (h, w, c) = dataset.image_dims();
        let images = Tensor::new(vec![labels.len(), h, w, c], data)?;
        let task_dataset =
            Dataset { images, labels, num_classes: dataset.num_classes, split: Split::Train };
        let path = out.join(format!("task{i}.sbds"));
        store_dataset(&task_dataset, &path)?;
        task_files.push(serde_json::json!({
            "file": format!("task{i}.sbds"),
            "samples": task_dataset.len(),
            "batches": task.batches.len(),
        }));
    }

    let meta = serde_json::json!({
        "tasks": stream.meta.tasks,
        "disjoint_percent": stream.meta.disjoint_percent,
        "blurry_percent": stream.meta.blurry_percent,
        "batch_size": stream.meta.batch_size,
        "seed": stream.meta.seed,
        "disjoint_assignment": stream.meta.disjoint_assignment,
        "blurry_major": stream.meta.blurry_major,
        "task_files": task_files,
    });
    let meta_path = out.join("stream.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
    println!("wrote {} and {} task files", meta_path.display(), stream.tasks.len());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config, baseline, seeds, out } => {
            let base = ExperimentConfig::load(config)?;
            let outcome =
                runner::run(&base, baseline.as_deref(), seeds.clone(), out.clone())?;
            println!(
                "baseline {} finished; results in {}",
                baseline_name(outcome.baseline),
                outcome.out_dir.display()
            );
            for s in &outcome.summaries {
                println!("seed {}: a_avg {:.4}, a_fin {:.4}", s.seed, s.a_avg, s.a_fin);
            }
            Ok(())
        }
        Command::GenData { spec, out } => cmd_gen_data(spec, out),
        Command::Split { data, tasks, n, m, batch_size, seed, out } => {
            cmd_split(data, *tasks, *n, *m, *batch_size, *seed, out)
        }
        Command::Plot { csv, out } => {
            plot::emit_plot(csv, out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
