//! Labeled datasets, procedural data generation, and i-Blurry task streams.
//!
//! An i-Blurry-n-m stream marks `n%` of the classes disjoint (each lives in
//! exactly one task) and spreads the rest: a blurry class keeps
//! `floor((100-m)%)` of its samples in a seeded major task and leaks the
//! remainder as evenly as possible across the other tasks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SBDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labeled image set with `[N, H, W, C]` storage.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!("images must be [N, H, W, C], got {s:?}"),
            });
        }
        if s[0] != self.labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!("{} images vs {} labels", s[0], self.labels.len()),
            });
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig { detail: "num_classes must be >= 1".into() });
        }
        for &l in &self.labels {
            if l >= self.num_classes {
                return Err(Error::LabelOutOfRange { label: l, num_classes: self.num_classes });
            }
        }
        Ok(())
    }

    /// Sample indices grouped by class, ascending within each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

// ── synthetic data ───────────────────────────────────────────────────

/// Parameters for the procedural class-conditional image generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Stddev of the per-pixel Gaussian noise.
    pub noise_std: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("num_classes", self.num_classes),
            ("samples_per_class", self.samples_per_class),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::InvalidConfig { detail: format!("{name} must be positive") });
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig { detail: "noise_std must be nonnegative".into() });
        }
        Ok(())
    }
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x5452_4149_4e00_0001,
        Split::Test => 0x5445_5354_0000_0002,
    }
}

/// Single-channel images: each class is a Gaussian intensity bump at a
/// class-specific grid cell plus a class-specific orientation grating, with
/// i.i.d. pixel noise on top. Train and test splits use disjoint seeds of
/// the same generator.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, split_salt(split)));
    let (h, w) = (spec.height, spec.width);
    let n = spec.num_classes * spec.samples_per_class;
    let grid = (spec.num_classes as f64).sqrt().ceil() as usize;
    let sigma = (h.min(w) as f64 / (2.0 * grid as f64)).max(1.0);
    let grating_period = 4.0;

    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        let cx = ((class % grid) as f64 + 0.5) * w as f64 / grid as f64;
        let cy = ((class / grid) as f64 + 0.5) * h as f64 / grid as f64;
        let theta = std::f64::consts::PI * class as f64 / spec.num_classes as f64;
        let (dir_x, dir_y) = (theta.cos(), theta.sin());
        for _ in 0..spec.samples_per_class {
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let bump = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let phase = (x as f64 * dir_x + y as f64 * dir_y) / grating_period;
                    let grating = 0.3 * (2.0 * std::f64::consts::PI * phase).cos();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push((bump + grating + spec.noise_std * noise) as f32);
                }
            }
            labels.push(class);
        }
    }
    let dataset = Dataset {
        images: Tensor::new(vec![n, h, w, 1], data)?,
        labels,
        num_classes: spec.num_classes,
        split,
    };
    dataset.validate()?;
    Ok(dataset)
}

// ── task stream ──────────────────────────────────────────────────────

/// One training batch of a task.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Task {
    pub batches: Vec<TaskBatch>,
}

impl Task {
    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(|b| b.labels.len()).sum()
    }

    pub fn classes_present(&self) -> std::collections::BTreeSet<usize> {
        self.batches.iter().flat_map(|b| b.labels.iter().copied()).collect()
    }
}

/// How the splitter placed classes, kept for auditability.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamMeta {
    pub tasks: usize,
    pub disjoint_percent: u32,
    pub blurry_percent: u32,
    pub batch_size: usize,
    pub seed: u64,
    /// Disjoint class -> its only task.
    pub disjoint_assignment: BTreeMap<usize, usize>,
    /// Blurry class -> its major task.
    pub blurry_major: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub meta: StreamMeta,
}

/// Partitions a dataset into an i-Blurry-n-m stream of `t` tasks.
///
/// Every train sample lands in exactly one task exactly once. Within a
/// task, samples are shuffled and chunked into `batch_size` batches (only
/// the last batch may be short). `t == 1` degenerates to a single task
/// holding everything.
pub fn iblurry_split(
    dataset: &Dataset,
    t: usize,
    n: u32,
    m: u32,
    batch_size: usize,
    seed: u64,
) -> Result<TaskStream> {
    dataset.validate()?;
    if t == 0 {
        return Err(Error::InvalidConfig { detail: "need at least one task".into() });
    }
    if n > 100 || m > 100 {
        return Err(Error::InvalidConfig { detail: format!("n={n} and m={m} must be percentages") });
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig { detail: "batch_size must be >= 1".into() });
    }
    if dataset.len() < dataset.num_classes {
        return Err(Error::InvalidConfig {
            detail: format!(
                "need at least one sample per class: {} samples, {} classes",
                dataset.len(),
                dataset.num_classes
            ),
        });
    }
    let num_disjoint = dataset.num_classes * n as usize / 100;
    if n > 0 && t > 1 && num_disjoint < t {
        return Err(Error::InvalidConfig {
            detail: format!("{t} tasks need at least {t} disjoint classes, got {num_disjoint}"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_order: Vec<usize> = (0..dataset.num_classes).collect();
    class_order.shuffle(&mut rng);
    let disjoint = &class_order[..num_disjoint];
    let blurry = &class_order[num_disjoint..];

    let mut disjoint_assignment = BTreeMap::new();
    for (i, &class) in disjoint.iter().enumerate() {
        disjoint_assignment.insert(class, i % t);
    }
    let mut blurry_major = BTreeMap::new();
    for &class in blurry {
        blurry_major.insert(class, rng.gen_range(0..t));
    }

    let groups = dataset.class_indices();
    let mut task_samples: Vec<Vec<usize>> = vec![Vec::new(); t];
    for &class in &class_order {
        if let Some(&task) = disjoint_assignment.get(&class) {
            task_samples[task].extend_from_slice(&groups[class]);
            continue;
        }
        let major = blurry_major[&class];
        let mut idxs = groups[class].clone();
        idxs.shuffle(&mut rng);
        let major_share = idxs.len() * (100 - m as usize) / 100;
        task_samples[major].extend_from_slice(&idxs[..major_share]);
        let remainder = &idxs[major_share..];
        if remainder.is_empty() {
            continue;
        }
        if t == 1 {
            task_samples[major].extend_from_slice(remainder);
        } else {
            let others: Vec<usize> = (0..t).filter(|&task| task != major).collect();
            let start = rng.gen_range(0..others.len());
            for (j, &sample) in remainder.iter().enumerate() {
                task_samples[others[(start + j) % others.len()]].push(sample);
            }
        }
    }

    let mut tasks = Vec::with_capacity(t);
    for samples in task_samples.iter_mut() {
        samples.shuffle(&mut rng);
        let mut batches = Vec::new();
        for chunk in samples.chunks(batch_size) {
            let images = dataset.images.gather_rows(chunk)?;
            let labels = chunk.iter().map(|&i| dataset.labels[i]).collect();
            batches.push(TaskBatch { images, labels });
        }
        tasks.push(Task { batches });
    }

    Ok(TaskStream {
        tasks,
        meta: StreamMeta {
            tasks: t,
            disjoint_percent: n,
            blurry_percent: m,
            batch_size,
            seed,
            disjoint_assignment,
            blurry_major,
        },
    })
}

// ── binary dataset format ────────────────────────────────────────────

/// Writes a dataset: magic, version, `N u64`, `H/W/C/num_classes u16`,
/// `N*H*W*C` little-endian f32 images, then `N` u16 labels.
pub fn store_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let (h, w, c) = dataset.image_dims();
    if h > u16::MAX as usize
        || w > u16::MAX as usize
        || c > u16::MAX as usize
        || dataset.num_classes > u16::MAX as usize
    {
        return Err(Error::InvalidConfig { detail: "dimensions exceed u16 format limits".into() });
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    binio::write_u32(&mut out, DATASET_VERSION)?;
    binio::write_u64(&mut out, dataset.len() as u64)?;
    binio::write_u16(&mut out, h as u16)?;
    binio::write_u16(&mut out, w as u16)?;
    binio::write_u16(&mut out, c as u16)?;
    binio::write_u16(&mut out, dataset.num_classes as u16)?;
    binio::write_f32s(&mut out, dataset.images.data())?;
    for &l in &dataset.labels {
        binio::write_u16(&mut out, l as u16)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`store_dataset`]; failures name the byte
/// offset and never return a partial dataset.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.expect_magic(DATASET_MAGIC, "dataset")?;
    r.expect_version(DATASET_VERSION, "dataset")?;
    let n = r.u64()? as usize;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let c = r.u16()? as usize;
    let num_classes = r.u16()? as usize;
    if h == 0 || w == 0 || c == 0 || num_classes == 0 {
        return Err(r.format_error(format!("invalid header: H={h} W={w} C={c} classes={num_classes}")));
    }
    let data = r.f32s(n * h * w * c)?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let l = r.u16()? as usize;
        if l >= num_classes {
            return Err(Error::Format {
                offset: at,
                detail: format!("label {l} out of range for {num_classes} classes"),
            });
        }
        labels.push(l);
    }
    let images = Tensor::new(vec![n, h, w, c], data)
        .map_err(|e| r.format_error(format!("invalid image data: {e}")))?;
    let dataset = Dataset { images, labels, num_classes, split };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec { num_classes: 10, samples_per_class: 100, height: 4, width: 4, noise_std: 0.0 }
    }

    /// Dataset whose single pixel encodes the sample index, so partition
    /// checks can track every sample exactly.
    fn id_dataset(num_classes: usize, per_class: usize) -> Dataset {
        let n = num_classes * per_class;
        let data: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
        Dataset {
            images: Tensor::new(vec![n, 1, 1, 1], data).unwrap(),
            labels,
            num_classes,
            split: Split::Train,
        }
    }

    fn collect_ids(stream: &TaskStream) -> Vec<u32> {
        let mut ids = Vec::new();
        for task in &stream.tasks {
            for batch in &task.batches {
                ids.extend(batch.images.data().iter().map(|v| *v as u32));
            }
        }
        ids
    }

    #[test]
    fn split_is_exact_partition() {
        let d = id_dataset(10, 100);
        let stream = iblurry_split(&d, 5, 50, 10, 32, 7).unwrap();
        let mut ids = collect_ids(&stream);
        ids.sort_unstable();
        assert_eq!(ids, (0..1000).collect::<Vec<u32>>());
    }

    #[test]
    fn split_counts_for_default_setup() {
        // 10 classes, 5 tasks, n=50, m=10, 100 samples/class
        let d = id_dataset(10, 100);
        let stream = iblurry_split(&d, 5, 50, 10, 32, 3).unwrap();
        assert_eq!(stream.meta.disjoint_assignment.len(), 5);
        assert_eq!(stream.meta.blurry_major.len(), 5);

        // each task holds exactly one disjoint class
        let mut tasks_used: Vec<usize> = stream.meta.disjoint_assignment.values().copied().collect();
        tasks_used.sort_unstable();
        assert_eq!(tasks_used, vec![0, 1, 2, 3, 4]);

        // per-class per-task tallies
        for class in 0..10 {
            let counts: Vec<usize> = stream
                .tasks
                .iter()
                .map(|t| {
                    t.batches
                        .iter()
                        .flat_map(|b| b.labels.iter())
                        .filter(|&&l| l == class)
                        .count()
                })
                .collect();
            if let Some(&task) = stream.meta.disjoint_assignment.get(&class) {
                assert_eq!(counts[task], 100, "disjoint class {class}");
                assert_eq!(counts.iter().sum::<usize>(), 100);
            } else {
                let major = stream.meta.blurry_major[&class];
                assert_eq!(counts[major], 90, "blurry class {class} major share");
                let mut off: Vec<usize> = (0..5).filter(|&t| t != major).map(|t| counts[t]).collect();
                off.sort_unstable();
                assert_eq!(off, vec![2, 2, 3, 3], "blurry class {class} off-task shares");
            }
        }
    }

    #[test]
    fn all_disjoint_when_n_100() {
        let d = id_dataset(10, 20);
        let stream = iblurry_split(&d, 5, 100, 10, 16, 1).unwrap();
        for class in 0..10 {
            let present: Vec<usize> = stream
                .tasks
                .iter()
                .enumerate()
                .filter(|(_, t)| t.classes_present().contains(&class))
                .map(|(i, _)| i)
                .collect();
            assert_eq!(present.len(), 1, "class {class} in tasks {present:?}");
        }
    }

    #[test]
    fn zero_blur_keeps_blurry_classes_in_major_task() {
        let d = id_dataset(10, 20);
        let stream = iblurry_split(&d, 5, 50, 0, 16, 2).unwrap();
        for (&class, &major) in &stream.meta.blurry_major {
            for (i, task) in stream.tasks.iter().enumerate() {
                let has = task.classes_present().contains(&class);
                assert_eq!(has, i == major, "class {class} task {i}");
            }
        }
    }

    #[test]
    fn too_few_disjoint_classes_rejected() {
        let d = id_dataset(4, 10);
        // n=50 of 4 classes -> 2 disjoint < 5 tasks
        assert!(iblurry_split(&d, 5, 50, 10, 8, 0).is_err());
    }

    #[test]
    fn single_task_holds_everything() {
        let d = id_dataset(4, 10);
        let stream = iblurry_split(&d, 1, 50, 10, 8, 0).unwrap();
        assert_eq!(stream.tasks.len(), 1);
        assert_eq!(stream.tasks[0].sample_count(), 40);
    }

    #[test]
    fn batch_sizes_match_config() {
        let d = id_dataset(10, 100);
        let stream = iblurry_split(&d, 5, 50, 10, 32, 9).unwrap();
        for task in &stream.tasks {
            for (i, batch) in task.batches.iter().enumerate() {
                if i + 1 < task.batches.len() {
                    assert_eq!(batch.labels.len(), 32);
                } else {
                    assert!(batch.labels.len() <= 32 && !batch.labels.is_empty());
                }
            }
        }
    }

    #[test]
    fn split_deterministic_under_seed() {
        let d = id_dataset(10, 50);
        let a = iblurry_split(&d, 5, 50, 10, 16, 42).unwrap();
        let b = iblurry_split(&d, 5, 50, 10, 16, 42).unwrap();
        assert_eq!(a.meta, b.meta);
        assert_eq!(collect_ids(&a), collect_ids(&b));
        let c = iblurry_split(&d, 5, 50, 10, 16, 43).unwrap();
        assert_ne!(collect_ids(&a), collect_ids(&c));
    }

    #[test]
    fn synthetic_zero_noise_repeats_class_image() {
        let spec = tiny_spec();
        let d = gen_synthetic(&spec, 5, Split::Train).unwrap();
        let per = 16; // 4x4 pixels
        for class in 0..10 {
            let base = class * 100 * per;
            let first = &d.images.data()[base..base + per];
            for s in 1..100 {
                let row = &d.images.data()[base + s * per..base + (s + 1) * per];
                assert_eq!(first, row, "class {class} sample {s}");
            }
        }
    }

    #[test]
    fn synthetic_classes_are_distinct() {
        let d = gen_synthetic(&tiny_spec(), 5, Split::Train).unwrap();
        let per = 16;
        for a in 0..10 {
            for b in (a + 1)..10 {
                let ia = &d.images.data()[a * 100 * per..a * 100 * per + per];
                let ib = &d.images.data()[b * 100 * per..b * 100 * per + per];
                assert_ne!(ia, ib, "classes {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn synthetic_splits_differ_but_share_structure() {
        let spec = SyntheticSpec { noise_std: 0.1, ..tiny_spec() };
        let train = gen_synthetic(&spec, 5, Split::Train).unwrap();
        let test = gen_synthetic(&spec, 5, Split::Test).unwrap();
        assert_ne!(train.images.data(), test.images.data());
        assert_eq!(train.labels, test.labels);
        // deterministic regeneration
        let again = gen_synthetic(&spec, 5, Split::Train).unwrap();
        assert_eq!(train.images.data(), again.images.data());
    }

    #[test]
    fn linear_classifier_separates_synthetic_classes() {
        use crate::optim::{sgd_step, GradMap};
        use crate::tape::Tape;

        let spec = SyntheticSpec {
            num_classes: 10,
            samples_per_class: 30,
            height: 16,
            width: 16,
            noise_std: 0.1,
        };
        let train = gen_synthetic(&spec, 11, Split::Train).unwrap();
        let test_spec = SyntheticSpec { samples_per_class: 10, ..spec };
        let test = gen_synthetic(&test_spec, 11, Split::Test).unwrap();

        let feat = 256;
        let mut w = Tensor::<f32>::zeros(&[feat, 10]);
        let mut b = Tensor::<f32>::zeros(&[10]);
        let x = train.images.reshaped(&[train.len(), feat]).unwrap();
        for _ in 0..150 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let wv = tape.leaf(w.clone().with_grad()).unwrap();
            let bv = tape.leaf(b.clone().with_grad()).unwrap();
            let logits = tape.matmul(xv, wv).unwrap();
            let logits = tape.bias_add(logits, bv).unwrap();
            let loss = tape.cross_entropy(logits, &train.labels).unwrap();
            let grads = tape.backward(loss).unwrap();
            let mut gm = GradMap::new();
            gm.insert("w", grads.get(wv).unwrap().clone());
            gm.insert("b", grads.get(bv).unwrap().clone());
            sgd_step(&mut [("w".into(), &mut w), ("b".into(), &mut b)], &gm, 0.5).unwrap();
        }

        let xt = test.images.reshaped(&[test.len(), feat]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(xt).unwrap();
        let wv = tape.constant(w).unwrap();
        let bv = tape.constant(b).unwrap();
        let logits = tape.matmul(xv, wv).unwrap();
        let logits = tape.bias_add(logits, bv).unwrap();
        let lv = tape.value(logits);
        let mut correct = 0usize;
        for (row, &label) in lv.data().chunks(10).zip(&test.labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == label {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.labels.len() as f64;
        assert!(acc > 0.9, "linear baseline accuracy {acc}");
    }

    #[test]
    fn dataset_roundtrip_is_bitwise() {
        let d = gen_synthetic(&tiny_spec(), 3, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.sbds");
        store_dataset(&d, &path).unwrap();
        let loaded = load_dataset(&path, Split::Train).unwrap();
        assert_eq!(loaded.images.data(), d.images.data());
        assert_eq!(loaded.labels, d.labels);
        assert_eq!(loaded.num_classes, d.num_classes);
    }

    #[test]
    fn truncated_dataset_is_rejected() {
        let d = id_dataset(3, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.sbds");
        store_dataset(&d, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(&path, Split::Train), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.sbds");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        match load_dataset(&path, Split::Train) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let d = id_dataset(3, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.sbds");
        store_dataset(&d, &path).unwrap();
        // patch the last label (offset = end - 2) to an invalid class
        let mut bytes = std::fs::read(&path).unwrap();
        let at = bytes.len() - 2;
        bytes[at..].copy_from_slice(&99u16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_dataset(&path, Split::Train) {
            Err(Error::Format { offset, detail }) => {
                assert_eq!(offset, at as u64);
                assert!(detail.contains("label"));
            }
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn split_respects_sample_per_class_floor() {
        // blurry classes with 7 samples, m=10: major share floor(7*0.9)=6
        let d = id_dataset(4, 7);
        let stream = iblurry_split(&d, 2, 50, 10, 4, 5).unwrap();
        let blurry: Vec<usize> = stream.meta.blurry_major.keys().copied().collect();
        assert_eq!(blurry.len(), 2);
        for class in blurry {
            let major = stream.meta.blurry_major[&class];
            let major_count = stream.tasks[major]
                .batches
                .iter()
                .flat_map(|b| b.labels.iter())
                .filter(|&&l| l == class)
                .count();
            assert_eq!(major_count, 6);
        }
    }
}
