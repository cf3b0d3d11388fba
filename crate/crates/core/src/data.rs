//! Datasets: seeded synthetic generators and a small binary image format.
//!
//! Binary layout (all integers little-endian `u32`):
//! `magic, count, channels, height, width, classes`, then `count` records of
//! one label byte followed by `channels * height * width` pixel bytes (CHW).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::Batch;

/// `b"SDPI"` read as a little-endian `u32`.
pub const IMAGE_FILE_MAGIC: u32 = u32::from_le_bytes(*b"SDPI");
const HEADER_BYTES: usize = 24;

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Class-prototype images built from random Gaussian bumps, with shifts,
    /// contrast jitter, a distractor prototype and pixel noise.
    SyntheticBlobs {
        samples: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Interleaved 2-D spiral arms, one per class.
    SyntheticSpirals {
        samples: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default = "default_spiral_classes")]
        classes: usize,
        #[serde(default = "default_spiral_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    BinaryImageFile {
        path: PathBuf,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}
fn default_classes() -> usize {
    10
}
fn default_channels() -> usize {
    3
}
fn default_image_size() -> usize {
    7
}
fn default_noise() -> f64 {
    0.35
}
fn default_spiral_classes() -> usize {
    3
}
fn default_spiral_noise() -> f64 {
    0.2
}

impl DatasetSpec {
    pub fn blobs(samples: usize, classes: usize, seed: u64) -> Self {
        DatasetSpec::SyntheticBlobs {
            samples,
            test_fraction: default_test_fraction(),
            classes,
            channels: default_channels(),
            image_size: default_image_size(),
            noise: default_noise(),
            seed,
        }
    }

    /// Resolves a relative file path against `base`.
    pub fn resolve(&mut self, base: &Path) {
        if let DatasetSpec::BinaryImageFile { path, .. } = self {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

/// Labelled samples, inputs flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    fn gather(&self, split: &Split, indices: &[usize]) -> Result<Batch> {
        let n = self.sample_len();
        let mut inputs = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(&split.inputs[i * n..(i + 1) * n]);
            labels.push(split.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        Batch::new(Tensor::new(shape, inputs)?, labels)
    }

    pub fn train_batch(&self, indices: &[usize]) -> Result<Batch> {
        self.gather(&self.train, indices)
    }

    pub fn test_batch(&self, indices: &[usize]) -> Result<Batch> {
        self.gather(&self.test, indices)
    }
}

/// Raw 8-bit image records, the in-memory form of the binary file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn record_pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.record_pixels();
        let mut out = Vec::with_capacity(HEADER_BYTES + self.len() * (n + 1));
        for v in [
            IMAGE_FILE_MAGIC,
            self.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (label, px) in self.labels.iter().zip(self.pixels.chunks(n)) {
            out.push(*label);
            out.extend_from_slice(px);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Data(format!(
                "truncated header: expected {HEADER_BYTES} bytes, got {}",
                bytes.len()
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        if word(0) != IMAGE_FILE_MAGIC {
            return Err(Error::Data(format!(
                "bad magic 0x{:08x} at byte offset 0 (expected 0x{IMAGE_FILE_MAGIC:08x})",
                word(0)
            )));
        }
        let [count, channels, height, width, classes] = [1, 2, 3, 4, 5].map(|i| word(i) as usize);
        for (name, v, off) in [("channels", channels, 8), ("height", height, 12), ("width", width, 16)] {
            if v == 0 {
                return Err(Error::Data(format!("{name} is zero at byte offset {off}")));
            }
        }
        if !(2..=256).contains(&classes) {
            return Err(Error::Data(format!("class count {classes} at byte offset 20 is outside 2..=256")));
        }
        let n = channels * height * width;
        let expected = HEADER_BYTES + count * (n + 1);
        if bytes.len() != expected {
            let complete = (bytes.len().saturating_sub(HEADER_BYTES)) / (n + 1);
            return Err(Error::Data(format!(
                "expected {expected} bytes for {count} records, file has {} (record {complete} is incomplete at byte offset {})",
                bytes.len(),
                HEADER_BYTES + complete * (n + 1)
            )));
        }
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * n);
        for r in 0..count {
            let off = HEADER_BYTES + r * (n + 1);
            let label = bytes[off];
            if label as usize >= classes {
                return Err(Error::Data(format!(
                    "label {label} at byte offset {off} is not below the class count {classes}"
                )));
            }
            labels.push(label);
            pixels.extend_from_slice(&bytes[off + 1..off + 1 + n]);
        }
        Ok(Self {
            channels,
            height,
            width,
            classes,
            labels,
            pixels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Splits off the last `test_fraction` of records, scales pixels to
    /// [0, 1] and standardizes each channel with train-split statistics.
    pub fn into_dataset(self, test_fraction: f64) -> Result<Dataset> {
        let count = self.len();
        let test = split_size(count, test_fraction)?;
        let train = count - test;
        let n = self.record_pixels();
        let plane = self.height * self.width;
        let scaled: Vec<f64> = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for c in 0..self.channels {
            let vals = || (0..train).flat_map(|r| &scaled[r * n + c * plane..][..plane]);
            let m = vals().sum::<f64>() / (train * plane) as f64;
            mean[c] = m;
            var[c] = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / (train * plane) as f64;
        }
        let inv: Vec<f64> = var
            .iter()
            .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        let inputs: Vec<f64> = scaled
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i % n) / plane;
                (v - mean[c]) * inv[c]
            })
            .collect();
        let labels: Vec<usize> = self.labels.iter().map(|&l| l as usize).collect();
        Ok(Dataset {
            sample_shape: vec![self.channels, self.height, self.width],
            classes: self.classes,
            train: Split {
                inputs: inputs[..train * n].to_vec(),
                labels: labels[..train].to_vec(),
            },
            test: Split {
                inputs: inputs[train * n..].to_vec(),
                labels: labels[train..].to_vec(),
            },
        })
    }
}

fn split_size(count: usize, test_fraction: f64) -> Result<usize> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config("dataset.test_fraction must be in (0, 1)"));
    }
    let test = (count as f64 * test_fraction).round() as usize;
    if test == 0 || test >= count {
        return Err(Error::Data(format!(
            "{count} records leave an empty split at test_fraction {test_fraction}"
        )));
    }
    Ok(test)
}

/// Seeded blob images as raw records.
pub fn synthetic_blobs(samples: usize, classes: usize, channels: usize, size: usize, noise: f64, seed: u64) -> Result<RawImageSet> {
    if !(2..=256).contains(&classes) || channels == 0 || size == 0 {
        return Err(Error::config("synthetic_blobs needs 2..=256 classes and non-empty images"));
    }
    if noise < 0.0 || !noise.is_finite() {
        return Err(Error::config("dataset.noise must be a non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let n = channels * plane;
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut img = vec![0.0; n];
            for _ in 0..3 {
                let cy = rng.random_range(0.0..size as f64);
                let cx = rng.random_range(0.0..size as f64);
                let sigma: f64 = rng.random_range(0.8..2.0);
                let amp: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let bump = (-d2 / (2.0 * sigma * sigma)).exp();
                        for c in 0..channels {
                            img[c * plane + y * size + x] += amp[c] * bump;
                        }
                    }
                }
            }
            img
        })
        .collect();
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut labels = Vec::with_capacity(samples);
    let mut pixels = Vec::with_capacity(samples * n);
    for _ in 0..samples {
        let label = rng.random_range(0..classes);
        let other = (label + rng.random_range(1..classes)) % classes;
        let dy = rng.random_range(-1i64..=1);
        let dx = rng.random_range(-1i64..=1);
        let contrast = rng.random_range(0.6..1.4);
        let mix = rng.random_range(0.0..0.5);
        for c in 0..channels {
            for y in 0..size {
                for x in 0..size {
                    let (sy, sx) = (y as i64 - dy, x as i64 - dx);
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < size && (sx as usize) < size;
                    let base = if inside {
                        prototypes[label][c * plane + sy as usize * size + sx as usize]
                    } else {
                        0.0
                    };
                    let v = contrast * base + mix * prototypes[other][c * plane + y * size + x] + noise * gauss.sample(&mut rng);
                    pixels.push((128.0 + 64.0 * v).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(label as u8);
    }
    Ok(RawImageSet {
        channels,
        height: size,
        width: size,
        classes,
        labels,
        pixels,
    })
}

/// Seeded 2-D spirals; train and test are drawn from one stream.
pub fn synthetic_spirals(samples: usize, test_fraction: f64, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("synthetic_spirals needs at least two classes"));
    }
    let test = split_size(samples, test_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(samples * 2);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let label = rng.random_range(0..classes);
        let t: f64 = rng.random_range(0.05..1.0);
        let angle = 2.0 * PI * label as f64 / classes as f64 + 3.0 * t + noise * rng.random_range(-1.0..1.0);
        inputs.push(2.0 * t * angle.cos());
        inputs.push(2.0 * t * angle.sin());
        labels.push(label);
    }
    let train = samples - test;
    Ok(Dataset {
        sample_shape: vec![2],
        classes,
        train: Split {
            inputs: inputs[..train * 2].to_vec(),
            labels: labels[..train].to_vec(),
        },
        test: Split {
            inputs: inputs[train * 2..].to_vec(),
            labels: labels[train..].to_vec(),
        },
    })
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::SyntheticBlobs {
            samples,
            test_fraction,
            classes,
            channels,
            image_size,
            noise,
            seed,
        } => synthetic_blobs(*samples, *classes, *channels, *image_size, *noise, *seed)?.into_dataset(*test_fraction),
        DatasetSpec::SyntheticSpirals {
            samples,
            test_fraction,
            classes,
            noise,
            seed,
        } => synthetic_spirals(*samples, *test_fraction, *classes, *noise, *seed),
        DatasetSpec::BinaryImageFile { path, test_fraction } => {
            if !path.exists() {
                return Err(Error::Data(format!("dataset file {} does not exist", path.display())));
            }
            RawImageSet::read(path)?.into_dataset(*test_fraction)
        }
    }
}
