//! Datasets: the seeded synthetic grating generator, the CIFAR-10 binary
//! batches, and directories of SGT tensors.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::sgt;
use crate::tensor::Tensor;

/// Labelled images of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!("label {bad} out of range for {num_classes} classes")));
        }
        if let Some(first) = images.first() {
            if let Some(img) = images.iter().find(|i| i.data.shape() != first.data.shape()) {
                return Err(Error::shape("dataset images", img.data.shape(), first.data.shape()));
            }
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[C, H, W]` of the images, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|i| i.data.shape())
    }

    /// Errors unless there is at least one image.
    pub fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        Ok(())
    }

    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 2,
            per_class: 32,
            size: 32,
            channels: 3,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Class `c` gets a sinusoidal grating with its own orientation and
/// frequency, a channel tint, a small random phase shift and Gaussian
/// noise. Pixels are clipped to `[0, 1]`. `multiple` is the factor the
/// image side must be divisible by (backbone stride times patch size).
pub fn gen_synthetic(spec: &SyntheticSpec, multiple: usize) -> Result<Dataset> {
    if spec.classes < 2 || spec.size == 0 || spec.channels == 0 {
        return Err(Error::config("dataset: classes must be >= 2 and size, channels positive"));
    }
    if multiple == 0 || spec.size % multiple != 0 {
        return Err(Error::config(format!(
            "dataset.size {} must be divisible by backbone stride x patch size = {multiple}",
            spec.size
        )));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::config("dataset.noise must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(format!("dataset.noise: {e}")))?;
    let s = spec.size;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for i in 0..spec.per_class * spec.classes {
        let c = i % spec.classes;
        let theta = PI * c as f64 / spec.classes as f64;
        let freq = 2.0 + c as f64;
        let phase = rng.random_range(-0.3..0.3);
        let (ct, st) = (theta.cos(), theta.sin());
        let mut data = Vec::with_capacity(spec.channels * s * s);
        for ch in 0..spec.channels {
            let tint = 0.6 + 0.4 * ((ch + c) % spec.channels.max(2)) as f64 / spec.channels.max(2) as f64;
            for y in 0..s {
                for x in 0..s {
                    let t = (x as f64 * ct + y as f64 * st) / s as f64;
                    let v = 0.5 + 0.35 * tint * (2.0 * PI * freq * t + phase).sin() + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        images.push(Image::new(Tensor::new(vec![spec.channels, s, s], data)?, Some(c))?);
        labels.push(c);
    }
    Dataset::new(images, labels, spec.classes)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_BATCH: usize = 10_000;
pub const CIFAR_BATCH_BYTES: usize = CIFAR_RECORD * CIFAR_RECORDS_PER_BATCH;

/// Parses one CIFAR-10 binary batch file.
pub fn load_cifar10_batch(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_cifar10_batch(&bytes, path)
}

pub fn parse_cifar10_batch(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.len() != CIFAR_BATCH_BYTES {
        return Err(Error::format(
            path,
            format!(
                "CIFAR-10 batch must be {CIFAR_BATCH_BYTES} bytes ({CIFAR_RECORDS_PER_BATCH} records of {CIFAR_RECORD}), found {}",
                bytes.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(CIFAR_RECORDS_PER_BATCH);
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_BATCH);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::format(path, format!("record {i}: label byte {label} outside 0..=9")));
        }
        let data = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::new(Tensor::new(vec![3, 32, 32], data)?, Some(label))?);
        labels.push(label);
    }
    Dataset::new(images, labels, 10)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Loads `data_batch_1..5.bin` (train) or `test_batch.bin` (test) from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(&f);
        if !path.exists() {
            return Err(Error::format(&path, "missing CIFAR-10 batch file"));
        }
        let batch = load_cifar10_batch(&path)?;
        images.extend(batch.images);
        labels.extend(batch.labels);
    }
    Dataset::new(images, labels, 10)
}

/// Writes `images.sgt` (`[N×C×H×W]`) and `labels.sgt` (`[N]`) into `dir`.
pub fn save_sgt_dir(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    data.require_nonempty()?;
    fs::create_dir_all(dir)?;
    let shape = data.image_shape().expect("nonempty");
    let mut dims = vec![data.len()];
    dims.extend_from_slice(shape);
    let pixels = data.images.iter().flat_map(|i| i.data.data().iter().copied()).collect();
    sgt::write_sgt(dir.join("images.sgt"), &Tensor::new(dims, pixels)?)?;
    let labels = data.labels.iter().map(|&l| l as f64).collect();
    sgt::write_sgt(dir.join("labels.sgt"), &Tensor::new(vec![data.len()], labels)?)
}

/// Reads a directory written by [`save_sgt_dir`].
pub fn load_sgt_dir(dir: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ipath = dir.join("images.sgt");
    let lpath = dir.join("labels.sgt");
    let images = sgt::read_sgt(&ipath)?;
    let labels = sgt::read_sgt(&lpath)?;
    if images.rank() != 4 {
        return Err(Error::format(&ipath, format!("expected rank 4 (N×C×H×W), found rank {}", images.rank())));
    }
    let n = images.shape()[0];
    if labels.shape() != [n] {
        return Err(Error::format(&lpath, format!("expected shape [{n}], found {:?}", labels.shape())));
    }
    let per = images.numel() / n;
    let chw = images.shape()[1..].to_vec();
    let mut out_images = Vec::with_capacity(n);
    let mut out_labels = Vec::with_capacity(n);
    for (i, (px, &l)) in images.data().chunks_exact(per).zip(labels.data()).enumerate() {
        if l < 0.0 || l.fract() != 0.0 || l >= num_classes as f64 {
            return Err(Error::format(&lpath, format!("label {l} at index {i} is not a class in 0..{num_classes}")));
        }
        out_images.push(Image::new(Tensor::new(chw.clone(), px.to_vec())?, Some(l as usize))?);
        out_labels.push(l as usize);
    }
    Dataset::new(out_images, out_labels, num_classes)
}
