//! Task streams: synthetic Gaussian clusters and class-split IDX / CIFAR binaries.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Reader, Section, Writer};
use crate::error::{Error, Result};
use crate::linalg::complete_orthonormal;
use crate::network::TaskId;
use crate::rng;
use crate::tensor::Tensor;

/// Inputs `[N, features]` with local class labels `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() || inputs.shape().len() != 2 {
            return Err(Error::Data(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let f = self.features();
        let mut data = Vec::with_capacity(indices.len() * f);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(&[indices.len(), f], data).expect("consistent rows"),
            labels,
        )
    }

    /// Consecutive index chunks, shuffled when `rng` is given.
    pub fn batches(&self, batch_size: usize, rng: Option<&mut rng::Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(r) = rng {
            order.shuffle(r);
        }
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: TaskId,
    /// Global class ids; local label `i` is `classes[i]`.
    pub classes: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamSource {
    SyntheticGaussian,
    SplitIdx,
    SplitCifarBinary,
}

/// Per-channel normalization applied at ingestion, plus the resulting value range.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub input_shape: Vec<usize>,
    pub source: StreamSource,
    pub normalization: Normalization,
}

impl TaskStream {
    /// Class sets must be pairwise disjoint and every split must match the input shape.
    pub fn validate(&self) -> Result<()> {
        let feat: usize = self.input_shape.iter().product();
        let mut seen = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != i {
                return Err(Error::Data(format!("task at position {i} has id {}", t.id)));
            }
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(Error::Data(format!("class {c} appears in more than one task")));
                }
            }
            for split in [&t.train, &t.test] {
                if split.features() != feat && !split.is_empty() {
                    return Err(Error::Data(format!(
                        "task {i}: {} features, input shape {:?}",
                        split.features(),
                        self.input_shape
                    )));
                }
                if split.labels.iter().any(|&l| l >= t.num_classes()) {
                    return Err(Error::Data(format!("task {i}: label out of range")));
                }
            }
            if t.train.is_empty() {
                return Err(Error::Data(format!("task {i}: empty training split")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Gaussian class clusters living in overlapping per-task subspaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Dimension of each task's input subspace.
    pub latent_rank: usize,
    /// Fraction of each task's subspace shared by all tasks.
    pub overlap: f64,
    /// Distance between class means in latent units (noise std is 1).
    pub separation: f64,
    /// Reshape each sample to `[channels, height, width]`; `dim` must match.
    pub image_shape: Option<[usize; 3]>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 2,
            dim: 16,
            train_per_class: 200,
            test_per_class: 100,
            latent_rank: 8,
            overlap: 0.75,
            separation: 4.0,
            image_shape: None,
            seed: 0,
        }
    }
}

/// Minimum held-out accuracy a linear probe must reach on each synthetic task.
pub const PROBE_TARGET: f64 = 0.95;

pub fn make_synthetic_stream(
    k_tasks: usize,
    classes_per_task: usize,
    dim: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<TaskStream> {
    make_synthetic_stream_with(&SyntheticConfig {
        tasks: k_tasks,
        classes_per_task,
        dim,
        train_per_class: n_per_class,
        test_per_class: (n_per_class / 2).max(1),
        latent_rank: (dim / 2).max(1),
        seed,
        ..SyntheticConfig::default()
    })
}

pub fn make_synthetic_stream_with(cfg: &SyntheticConfig) -> Result<TaskStream> {
    if cfg.tasks == 0 || cfg.classes_per_task == 0 || cfg.dim == 0 || cfg.train_per_class == 0 {
        return Err(Error::Config("synthetic stream counts must all be at least 1".into()));
    }
    if cfg.latent_rank == 0 || cfg.latent_rank > cfg.dim {
        return Err(Error::Config(format!(
            "latent rank {} must lie in 1..={}",
            cfg.latent_rank, cfg.dim
        )));
    }
    if !(0.0..=1.0).contains(&cfg.overlap) || cfg.separation <= 0.0 {
        return Err(Error::Config("overlap must be in [0, 1] and separation positive".into()));
    }
    let input_shape = match cfg.image_shape {
        Some(s) if s.iter().product::<usize>() == cfg.dim => s.to_vec(),
        Some(s) => {
            return Err(Error::Config(format!("image shape {s:?} does not hold {} values", cfg.dim)))
        }
        None => vec![cfg.dim],
    };

    let mut frame_rng = rng::stream(cfg.seed, "synthetic-frame", 0);
    let shared_cols = ((cfg.overlap * cfg.latent_rank as f64).round() as usize).min(cfg.latent_rank);
    let shared = random_orthonormal(&mut frame_rng, cfg.dim, shared_cols, Vec::new());

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let mut task_rng = rng::stream(cfg.seed, "synthetic-task", t as u64);
        let basis = random_orthonormal(&mut task_rng, cfg.dim, cfg.latent_rank, shared.clone());
        let directions: Vec<Vec<f64>> = (0..cfg.classes_per_task)
            .map(|_| unit_gaussian(&mut task_rng, cfg.latent_rank))
            .collect();
        let mut separation = cfg.separation;
        let mut attempt = 0;
        let task = loop {
            let mut sample_rng = rng::stream(cfg.seed, "synthetic-samples", (t * 64 + attempt) as u64);
            let means = class_means(&directions, separation);
            let train = sample_split(&mut sample_rng, &basis, &means, cfg.train_per_class);
            let test = sample_split(&mut sample_rng, &basis, &means, cfg.test_per_class);
            let acc = linear_probe_accuracy(&train, &test, cfg.classes_per_task);
            if acc >= PROBE_TARGET || attempt >= 16 {
                break Task {
                    id: t,
                    classes: (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).collect(),
                    train,
                    test,
                };
            }
            separation *= 1.2;
            attempt += 1;
        };
        tasks.push(task);
    }
    let (min, max) = value_range(&tasks);
    let stream = TaskStream {
        tasks,
        input_shape,
        source: StreamSource::SyntheticGaussian,
        normalization: Normalization {
            mean: vec![0.0],
            std: vec![1.0],
            min,
            max,
        },
    };
    stream.validate()?;
    Ok(stream)
}

fn unit_gaussian(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Extends `start` with `count - start.len()` random orthonormal columns (returned column-wise).
fn random_orthonormal(rng: &mut rng::Rng, dim: usize, count: usize, start: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut basis = start;
    while basis.len() < count {
        let mut v = unit_gaussian(rng, dim);
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    if basis.len() > count {
        basis.truncate(count);
    }
    if count == dim {
        basis = complete_orthonormal(basis, dim);
    }
    basis
}

/// Class means centred on the origin: pairwise offsets scaled so the two-class distance is `separation`.
fn class_means(directions: &[Vec<f64>], separation: f64) -> Vec<Vec<f64>> {
    let r = directions[0].len();
    if directions.len() == 1 {
        return vec![vec![0.0; r]];
    }
    let k = directions.len() as f64;
    let centroid: Vec<f64> = (0..r)
        .map(|i| directions.iter().map(|d| d[i]).sum::<f64>() / k)
        .collect();
    let centred: Vec<Vec<f64>> = directions
        .iter()
        .map(|d| d.iter().zip(&centroid).map(|(a, c)| a - c).collect())
        .collect();
    let min_dist = (0..centred.len())
        .flat_map(|i| ((i + 1)..centred.len()).map(move |j| (i, j)))
        .map(|(i, j)| {
            centred[i]
                .iter()
                .zip(&centred[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
        .max(1e-9);
    centred
        .into_iter()
        .map(|d| d.into_iter().map(|v| v * separation / min_dist).collect())
        .collect()
}

fn sample_split(rng: &mut rng::Rng, basis: &[Vec<f64>], means: &[Vec<f64>], per_class: usize) -> Dataset {
    let dim = basis[0].len();
    let r = basis.len();
    let n = per_class * means.len();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            let z: Vec<f64> = (0..r)
                .map(|j| mean[j] + Distribution::<f64>::sample(&StandardNormal, rng))
                .collect();
            for d in 0..dim {
                data.push((0..r).map(|j| basis[j][d] * z[j]).sum());
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(&[n, dim], data).expect("sizes"), labels).expect("sizes")
}

fn value_range(tasks: &[Task]) -> (f64, f64) {
    tasks
        .iter()
        .flat_map(|t| t.train.inputs.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Held-out accuracy of a softmax regression fitted by full-batch gradient descent.
pub fn linear_probe_accuracy(train: &Dataset, test: &Dataset, classes: usize) -> f64 {
    if classes < 2 {
        return 1.0;
    }
    let f = train.features();
    let n = train.len() as f64;
    let mut w = vec![0.0; classes * (f + 1)];
    for _ in 0..300 {
        let mut grad = vec![0.0; w.len()];
        for (i, &y) in train.labels.iter().enumerate() {
            let x = train.inputs.row(i);
            let probs = probe_probs(&w, x, classes);
            for c in 0..classes {
                let err = probs[c] - if c == y { 1.0 } else { 0.0 };
                let row = &mut grad[c * (f + 1)..(c + 1) * (f + 1)];
                for (g, xv) in row.iter_mut().zip(x) {
                    *g += err * xv;
                }
                row[f] += err;
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * g / n;
        }
    }
    let correct = test
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&probe_probs(&w, test.inputs.row(i), classes)) == y)
        .count();
    correct as f64 / test.len().max(1) as f64
}

fn probe_probs(w: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let f = x.len();
    let logits: Vec<f64> = (0..classes)
        .map(|c| {
            let row = &w[c * (f + 1)..(c + 1) * (f + 1)];
            row[..f].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[f]
        })
        .collect();
    crate::tape::softmax_rows(&logits, classes)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

// ---------------------------------------------------------------------------
// Ingestion of IDX and CIFAR binary files.

/// A decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an unsigned-byte IDX file (`00 00 08 <ndims>` magic, big-endian dims).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let fail = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 4 {
        return Err(fail(bytes.len(), "truncated IDX magic".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4"));
    if magic >> 16 != 0 || bytes[2] != 0x08 {
        return Err(fail(0, format!("IDX magic {magic:#010x} is not an unsigned-byte array")));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(fail(3, "IDX array with zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(fail(bytes.len(), format!("truncated IDX header: need {header} bytes")));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4")) as usize)
        .collect();
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fail(4, "IDX dimensions overflow".into()))?;
    let body = &bytes[header..];
    if body.len() != numel {
        return Err(fail(
            header + body.len().min(numel),
            format!("IDX body has {} bytes, dimensions {dims:?} need {numel}", body.len()),
        ));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

/// Splits a CIFAR binary file into labels and `3·32·32` pixel records.
/// `label_bytes` is 1 for CIFAR-10 and 2 for CIFAR-100 (coarse, fine; the fine label is kept).
pub fn parse_cifar(bytes: &[u8], label_bytes: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    const PIXELS: usize = 3 * 32 * 32;
    if !(1..=2).contains(&label_bytes) {
        return Err(Error::Config(format!("CIFAR label bytes must be 1 or 2, got {label_bytes}")));
    }
    let record = label_bytes + PIXELS;
    if !bytes.len().is_multiple_of(record) {
        let offset = bytes.len() - bytes.len() % record;
        return Err(Error::Format {
            offset: offset as u64,
            msg: format!("partial CIFAR record: {} trailing bytes", bytes.len() - offset),
        });
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for r in bytes.chunks(record) {
        labels.push(r[label_bytes - 1]);
        pixels.extend_from_slice(&r[label_bytes..]);
    }
    Ok((labels, pixels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IngestSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    CifarBinary {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default = "one")]
        label_bytes: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSpec {
    #[serde(flatten)]
    pub source: IngestSource,
    /// Number of tasks; classes are split into equal contiguous groups.
    pub tasks: usize,
    #[serde(default)]
    pub train_per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
}

/// Raw images as bytes `[N, C·H·W]` with integer labels.
struct RawSplit {
    shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

pub fn ingest(spec: &IngestSpec) -> Result<TaskStream> {
    let read = |p: &PathBuf| -> Result<Vec<u8>> {
        fs::read(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
    };
    let (train, test, source) = match &spec.source {
        IngestSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            idx_split(&read(train_images)?, &read(train_labels)?)?,
            idx_split(&read(test_images)?, &read(test_labels)?)?,
            StreamSource::SplitIdx,
        ),
        IngestSource::CifarBinary {
            train,
            test,
            label_bytes,
        } => {
            let load = |files: &[PathBuf]| -> Result<RawSplit> {
                let mut pixels = Vec::new();
                let mut labels = Vec::new();
                for f in files {
                    let (l, p) = parse_cifar(&read(f)?, *label_bytes)?;
                    labels.extend(l.into_iter().map(usize::from));
                    pixels.extend(p);
                }
                Ok(RawSplit {
                    shape: [3, 32, 32],
                    pixels,
                    labels,
                })
            };
            (load(train)?, load(test)?, StreamSource::SplitCifarBinary)
        }
    };
    split_by_class(train, test, spec, source)
}

fn idx_split(images: &[u8], labels: &[u8]) -> Result<RawSplit> {
    let img = parse_idx(images)?;
    let lab = parse_idx(labels)?;
    let shape = match img.dims.as_slice() {
        &[_, h, w] => [1, h, w],
        &[_, c, h, w] => [c, h, w],
        other => {
            return Err(Error::Format {
                offset: 3,
                msg: format!("IDX images need 3 or 4 dimensions, got {other:?}"),
            })
        }
    };
    if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{:?} labels for {} images", lab.dims, img.dims[0]),
        });
    }
    Ok(RawSplit {
        shape,
        pixels: img.data,
        labels: lab.data.into_iter().map(usize::from).collect(),
    })
}

fn split_by_class(train: RawSplit, test: RawSplit, spec: &IngestSpec, source: StreamSource) -> Result<TaskStream> {
    if train.shape != test.shape {
        return Err(Error::Data(format!(
            "train images {:?} and test images {:?} differ in shape",
            train.shape, test.shape
        )));
    }
    let classes: BTreeSet<usize> = train.labels.iter().copied().collect();
    let classes: Vec<usize> = classes.into_iter().collect();
    if spec.tasks == 0 || classes.len() < spec.tasks || !classes.len().is_multiple_of(spec.tasks) {
        return Err(Error::Config(format!(
            "{} classes cannot be split into {} equal tasks",
            classes.len(),
            spec.tasks
        )));
    }
    let per_task = classes.len() / spec.tasks;
    let [c, h, w] = train.shape;
    let feat = c * h * w;

    // per-channel statistics of the training split, on the [0, 1] scale
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let n_train = train.labels.len();
    for img in train.pixels.chunks(feat) {
        for ch in 0..c {
            for &p in &img[ch * h * w..(ch + 1) * h * w] {
                let v = p as f64 / 255.0;
                mean[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let count = (n_train * h * w).max(1) as f64;
    let std: Vec<f64> = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= count;
            (s / count - *m * *m).max(1e-12).sqrt()
        })
        .collect();
    let normalize = |img: &[u8]| -> Vec<f64> {
        img.iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = i / (h * w);
                (p as f64 / 255.0 - mean[ch]) / std[ch]
            })
            .collect()
    };

    let build = |raw: &RawSplit, group: &[usize], cap: Option<usize>| -> Result<Dataset> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut taken = vec![0usize; group.len()];
        for (i, &l) in raw.labels.iter().enumerate() {
            if let Some(local) = group.iter().position(|&g| g == l) {
                if cap.is_none_or(|m| taken[local] < m) {
                    taken[local] += 1;
                    data.extend(normalize(&raw.pixels[i * feat..(i + 1) * feat]));
                    labels.push(local);
                }
            }
        }
        Dataset::new(Tensor::new(&[labels.len(), feat], data)?, labels)
    };

    let mut tasks = Vec::with_capacity(spec.tasks);
    for (t, group) in classes.chunks(per_task).enumerate() {
        tasks.push(Task {
            id: t,
            classes: group.to_vec(),
            train: build(&train, group, spec.train_per_class)?,
            test: build(&test, group, spec.test_per_class)?,
        });
    }
    let lo = (0..c).map(|ch| -mean[ch] / std[ch]).fold(f64::INFINITY, f64::min);
    let hi = (0..c)
        .map(|ch| (1.0 - mean[ch]) / std[ch])
        .fold(f64::NEG_INFINITY, f64::max);
    let stream = TaskStream {
        tasks,
        input_shape: vec![c, h, w],
        source,
        normalization: Normalization {
            mean,
            std,
            min: lo,
            max: hi,
        },
    };
    stream.validate()?;
    Ok(stream)
}

impl Section for TaskStream {
    const TAG: [u8; 4] = *b"STRM";

    fn encode(&self, w: &mut Writer) {
        w.u8(match self.source {
            StreamSource::SyntheticGaussian => 0,
            StreamSource::SplitIdx => 1,
            StreamSource::SplitCifarBinary => 2,
        });
        w.usizes(&self.input_shape);
        w.f64s(&self.normalization.mean);
        w.f64s(&self.normalization.std);
        w.f64(self.normalization.min);
        w.f64(self.normalization.max);
        w.u32(self.tasks.len() as u32);
        for t in &self.tasks {
            w.usize(t.id);
            w.usizes(&t.classes);
            for split in [&t.train, &t.test] {
                w.tensor(&split.inputs);
                w.usizes(&split.labels);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let source = match r.u8()? {
            0 => StreamSource::SyntheticGaussian,
            1 => StreamSource::SplitIdx,
            2 => StreamSource::SplitCifarBinary,
            k => return Err(Error::Format { offset: at, msg: format!("unknown stream source {k}") }),
        };
        let input_shape = r.usizes()?;
        let normalization = Normalization {
            mean: r.f64s()?,
            std: r.f64s()?,
            min: r.f64()?,
            max: r.f64()?,
        };
        let n = r.u32()?;
        let mut tasks = Vec::new();
        for _ in 0..n {
            let id = r.usize()?;
            let classes = r.usizes()?;
            let at = r.offset();
            let mut split = || -> Result<Dataset> {
                let inputs = r.tensor()?;
                let labels = r.usizes()?;
                Dataset::new(inputs, labels).map_err(|e| Error::Format {
                    offset: at,
                    msg: e.to_string(),
                })
            };
            let train = split()?;
            let test = split()?;
            tasks.push(Task { id, classes, train, test });
        }
        let stream = TaskStream {
            tasks,
            input_shape,
            source,
            normalization,
        };
        stream.validate().map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        Ok(stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_bookkeeping() {
        let s = make_synthetic_stream(2, 2, 16, 200, 3).unwrap();
        let total: usize = s.tasks.iter().map(|t| t.train.len()).sum();
        assert_eq!(total, 800);
        assert_eq!(s.tasks[1].classes, vec![2, 3]);
        assert_eq!(s, make_synthetic_stream(2, 2, 16, 200, 3).unwrap());
        assert_ne!(s, make_synthetic_stream(2, 2, 16, 200, 4).unwrap());
    }

    #[test]
    fn synthetic_rejects_zero_counts() {
        assert!(matches!(make_synthetic_stream(0, 2, 16, 10, 0), Err(Error::Config(_))));
        assert!(matches!(make_synthetic_stream(2, 2, 16, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn idx_header_and_body() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        bytes.extend(0..12u8);
        let a = parse_idx(&bytes).unwrap();
        assert_eq!(a.dims, vec![2, 2, 3]);
        assert_eq!(a.data.len(), 12);
        assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()), IDX_IMAGES_MAGIC);

        let mut bad = bytes.clone();
        bad[2] = 0x0D;
        assert!(matches!(parse_idx(&bad), Err(Error::Format { offset: 0, .. })));
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(parse_idx(short), Err(Error::Format { offset: 27, .. })));
    }

    #[test]
    fn cifar_records() {
        let mut bytes = Vec::new();
        for l in [3u8, 7] {
            bytes.push(l);
            bytes.extend(std::iter::repeat_n(l, 3072));
        }
        let (labels, pixels) = parse_cifar(&bytes, 1).unwrap();
        assert_eq!(labels, vec![3, 7]);
        assert_eq!(pixels.len(), 2 * 3072);
        bytes.push(0);
        assert!(matches!(
            parse_cifar(&bytes, 1),
            Err(Error::Format { offset: 6146, .. })
        ));
    }
}
