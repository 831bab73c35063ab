//! Datasets: a seeded synthetic image task and the CIFAR-10 binary format.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// A labelled image set stored as one `[N, C, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(images: Tensor4, labels: Vec<usize>) -> Result<Self> {
        if images.dims()[0] != labels.len() {
            return Err(Error::shape("samples", images.dims()[0], labels.len()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.dims();
        [c, h, w]
    }

    /// Copies the given samples, in order, into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let images = self.images.select_items(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Samples {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Samples { images, labels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub train: Samples,
    pub test: Samples,
}

/// Seeded 10-class task of noisy oriented gratings.
///
/// Class `c` fixes the grating orientation (`c mod 5` of five evenly spaced
/// angles) and the colour pattern (`c / 5`: in phase or counter-phase red and
/// blue). Phase and frequency are drawn per image and Gaussian pixel noise is
/// added, so the class is only recoverable from structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 16,
            train_count: 1000,
            test_count: 1000,
            noise: 2.0,
            seed: 7,
        }
    }
}

pub const SYNTHETIC_CLASSES: usize = 10;

fn grating(rng: &mut ChaCha8Rng, noise: &Normal<f32>, class: usize, size: usize, out: &mut [f32]) {
    let angle = PI * (class % 5) as f32 / 5.0 + rng.random_range(-0.12..0.12);
    let freq = 2.0 * PI * rng.random_range(0.16..0.26);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let sign = if class < 5 { 1.0 } else { -1.0 };
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let v = (freq * (dx * x as f32 + dy * y as f32) + phase).sin();
            let p = y * size + x;
            out[p] = v + noise.sample(rng);
            out[plane + p] = 0.5 * v.abs() + noise.sample(rng);
            out[2 * plane + p] = sign * v + noise.sample(rng);
        }
    }
}

fn synthetic_split(spec: &SyntheticSpec, count: usize, stream: u64) -> Samples {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut images = Tensor4::zeros([count, 3, spec.size, spec.size]);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = rng.random_range(0..SYNTHETIC_CLASSES);
        grating(&mut rng, &noise, class, spec.size, images.item_mut(i));
        labels.push(class);
    }
    Samples { images, labels }
}

/// Generates the synthetic task. The result depends only on `spec`.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.size < 4 {
        return Err(Error::Config(format!("synthetic image size must be at least 4, got {}", spec.size)));
    }
    if spec.train_count == 0 || spec.test_count == 0 {
        return Err(Error::Config("synthetic splits must be non-empty".into()));
    }
    Ok(Dataset {
        name: "synthetic".into(),
        classes: SYNTHETIC_CLASSES,
        train: synthetic_split(spec, spec.train_count, 1),
        test: synthetic_split(spec, spec.test_count, 2),
    })
}

pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Decodes CIFAR-10 binary records (one label byte, then 1024 bytes each of
/// red, green and blue) and normalizes with the usual per-channel statistics.
pub fn decode_cifar10(bytes: &[u8], source: &str) -> Result<Samples> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Validation(format!(
            "{source}: {} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Tensor4::zeros([count, 3, 32, 32]);
    let mut labels = Vec::with_capacity(count);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(Error::Validation(format!("{source}: record {i} has label {label}")));
        }
        labels.push(label);
        let item = images.item_mut(i);
        for (p, (&byte, v)) in record[1..].iter().zip(item.iter_mut()).enumerate() {
            let c = p / 1024;
            *v = (byte as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c];
        }
    }
    Samples::new(images, labels)
}

fn concat(parts: Vec<Samples>) -> Result<Samples> {
    let count: usize = parts.iter().map(Samples::len).sum();
    let mut data = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for p in parts {
        labels.extend_from_slice(&p.labels);
        data.extend(p.images.into_vec());
    }
    Samples::new(Tensor4::from_vec([count, 3, 32, 32], data)?, labels)
}

/// Loads the standard binary layout: `data_batch_1.bin` through
/// `data_batch_5.bin` and `test_batch.bin` inside `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| -> Result<Samples> {
        let path = dir.join(name);
        let bytes = fs::read(&path)?;
        decode_cifar10(&bytes, &path.display().to_string())
    };
    let train = concat((1..=5).map(|i| read(&format!("data_batch_{i}.bin"))).collect::<Result<_>>()?)?;
    let test = read("test_batch.bin")?;
    Ok(Dataset {
        name: "cifar10".into(),
        classes: 10,
        train,
        test,
    })
}

/// Where a command gets its data from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Cifar10 {
        path: Option<PathBuf>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic(spec) => synthetic(spec),
            DatasetSource::Cifar10 { path: Some(dir) } => load_cifar10(dir),
            DatasetSource::Cifar10 { path: None } => {
                Err(Error::Config("the cifar10 dataset source needs a `path` to the binary batches".into()))
            }
        }
    }
}
