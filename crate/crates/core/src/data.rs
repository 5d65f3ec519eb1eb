//! CIFAR-10 binary ingestion, normalization, augmentation, batching and a
//! seeded synthetic image set.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_BYTES: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
/// One label byte followed by the CHW pixel bytes.
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const RECORDS_PER_FILE: usize = 10_000;
/// Zero padding on each side used by translation augmentation.
pub const PAD: usize = 4;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Byte images (`N x 3 x 32 x 32`, CHW per image) with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, split: Split, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_BYTES {
            return Err(Error::data(format!(
                "{} image bytes do not match {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::data(format!(
                "label {bad} outside [0, {})",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            split,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            class_names: self.class_names.clone(),
        }
    }

    /// Serializes in the CIFAR-10 binary record layout.
    pub fn to_cifar_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    /// Normalized (and optionally augmented) batch tensor with its labels.
    pub fn batch<T: Real, R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        normalizer: &Normalizer,
        mut augment_rng: Option<&mut R>,
    ) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            let img: Vec<T> = normalizer.normalize(self.image(i));
            match augment_rng.as_deref_mut() {
                Some(rng) => data.extend(augment(&img, rng)),
                None => data.extend(img),
            }
        }
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        let tensor = Tensor::new(&[indices.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
            .expect("batch shape matches image bytes");
        (tensor, labels)
    }
}

/// Splits raw CIFAR-10 binary bytes into `(images, labels)`.
pub fn parse_batch(bytes: &[u8], expected_records: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    let expected = expected_records * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "corrupt CIFAR-10 batch: expected {expected} bytes ({expected_records} records of {RECORD_BYTES}), found {}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(expected_records * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(expected_records);
    for record in bytes.chunks_exact(RECORD_BYTES) {
        labels.push(record[0]);
        images.extend_from_slice(&record[1..]);
    }
    Ok((images, labels))
}

pub fn read_batch_file(path: &Path, expected_records: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    parse_batch(&bytes, expected_records)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn class_names() -> Vec<String> {
    CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect()
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let (im, lb) = read_batch_file(&dir.join(format!("data_batch_{i}.bin")), RECORDS_PER_FILE)?;
        images.extend(im);
        labels.extend(lb);
    }
    let train = Dataset::new(images, labels, Split::Train, class_names())?;
    let (im, lb) = read_batch_file(&dir.join("test_batch.bin"), RECORDS_PER_FILE)?;
    let test = Dataset::new(im, lb, Split::Test, class_names())?;
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormalizationMode {
    /// Per-channel mean and standard deviation of the training split.
    MeanStd,
    /// Plain division by 255.
    Scale255,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalizer {
    pub fn fit(train: &Dataset, mode: NormalizationMode) -> Result<Self> {
        if mode == NormalizationMode::Scale255 {
            return Ok(Self {
                mean: [0.0; CHANNELS],
                std: [255.0; CHANNELS],
            });
        }
        if train.is_empty() {
            return Err(Error::data("cannot fit a normalizer on an empty dataset"));
        }
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        for i in 0..train.len() {
            for (c, px) in train.image(i).chunks_exact(plane).enumerate() {
                for &p in px {
                    let v = p as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (train.len() * plane) as f64;
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            mean[c] = sum[c] / n;
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
            if std[c] <= 0.0 {
                return Err(Error::data(format!("channel {c} has zero variance")));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn normalize<T: Real>(&self, pixels: &[u8]) -> Vec<T> {
        let plane = pixels.len() / CHANNELS;
        pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = i / plane;
                T::from_f64_lossy((p as f64 - self.mean[c]) / self.std[c])
            })
            .collect()
    }

    pub fn denormalize<T: Real>(&self, values: &[T]) -> Vec<f64> {
        let plane = values.len() / CHANNELS;
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / plane;
                v.to_f64_lossy() * self.std[c] + self.mean[c]
            })
            .collect()
    }
}

/// Crop offsets into the zero-padded image (each in `0..=2 * PAD`) and
/// horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub offset_y: usize,
    pub offset_x: usize,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        offset_y: PAD,
        offset_x: PAD,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            offset_y: rng.random_range(0..=2 * PAD),
            offset_x: rng.random_range(0..=2 * PAD),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Zero-pads by [`PAD`], crops back to 32x32 at the given offsets, then
/// optionally mirrors columns.
pub fn apply_augmentation<T: Real>(image: &[T], aug: Augmentation) -> Vec<T> {
    let size = IMAGE_SIZE;
    let mut out = vec![T::zero(); image.len()];
    for c in 0..CHANNELS {
        for i in 0..size {
            let src_i = (i + aug.offset_y) as isize - PAD as isize;
            if src_i < 0 || src_i >= size as isize {
                continue;
            }
            for j in 0..size {
                let src_j = (j + aug.offset_x) as isize - PAD as isize;
                if src_j < 0 || src_j >= size as isize {
                    continue;
                }
                let dst_j = if aug.flip { size - 1 - j } else { j };
                out[(c * size + i) * size + dst_j] = image[(c * size + src_i as usize) * size + src_j as usize];
            }
        }
    }
    out
}

pub fn augment<T: Real, R: Rng + ?Sized>(image: &[T], rng: &mut R) -> Vec<T> {
    apply_augmentation(image, Augmentation::sample(rng))
}

/// Shuffled index batches covering `0..n` exactly once. A trailing batch
/// of one sample is merged into the previous batch (batch norm needs at
/// least two).
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// Parameters of the seeded synthetic image set.
///
/// Class `c` is an oriented colour grating (orientation, spatial frequency
/// and colour determined by `c`) with a random phase per image, plus a
/// class-positioned Gaussian blob and pixel noise. The random phase makes
/// the classes inseparable by a linear function of the pixels while a
/// convolutional energy detector can tell them apart.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise (0-255 scale).
    pub noise: f64,
    /// Grating amplitude (0-255 scale).
    pub contrast: f64,
    /// Peak of the class-positioned blob (0-255 scale).
    pub blob: f64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            seed,
            noise: 40.0,
            contrast: 60.0,
            blob: 50.0,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::config(format!(
                "synthetic set needs 2..=256 classes, got {}",
                self.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
        let n = self.classes * self.per_class;
        let mut images = Vec::with_capacity(n * IMAGE_BYTES);
        let mut labels = Vec::with_capacity(n);
        let size = IMAGE_SIZE as f64;
        for idx in 0..n {
            let class = idx % self.classes;
            let frac = class as f64 / self.classes as f64;
            let theta = PI * frac;
            let freq = if class.is_multiple_of(2) { 3.0 } else { 5.0 };
            let palette = [
                (2.0 * PI * frac).cos(),
                (2.0 * PI * frac + 2.0 * PI / 3.0).cos(),
                (2.0 * PI * frac + 4.0 * PI / 3.0).cos(),
            ];
            let phase = rng.random_range(0.0..2.0 * PI);
            let (bx, by) = (
                size * (0.25 + 0.5 * (2.0 * PI * frac).cos().mul_add(0.5, 0.5)),
                size * (0.25 + 0.5 * (2.0 * PI * frac).sin().mul_add(0.5, 0.5)),
            );
            let jitter = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            for &tint in &palette {
                for i in 0..IMAGE_SIZE {
                    for j in 0..IMAGE_SIZE {
                        let (x, y) = (j as f64, i as f64);
                        let u = (x * theta.cos() + y * theta.sin()) / size;
                        let grating = (2.0 * PI * freq * u + phase).sin();
                        let dx = x - bx - jitter.0;
                        let dy = y - by - jitter.1;
                        let blob = (-(dx * dx + dy * dy) / 18.0).exp();
                        let v = 128.0
                            + self.contrast * grating * (0.6 + 0.4 * tint)
                            + self.blob * blob * tint
                            + noise.sample(&mut rng);
                        images.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            labels.push(class as u8);
        }
        let names = (0..self.classes).map(|c| format!("class{c}")).collect();
        Dataset::new(images, labels, Split::Train, names)
    }
}

pub fn make_synthetic(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(classes, per_class, seed).generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = make_synthetic(10, 100, 7).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a, make_synthetic(10, 100, 7).unwrap());
        assert_ne!(a.images, make_synthetic(10, 100, 8).unwrap().images);
    }

    #[test]
    fn synthetic_rejects_single_class() {
        assert!(make_synthetic(1, 10, 0).is_err());
    }

    #[test]
    fn truncated_batch_reports_sizes() {
        let bytes = vec![0u8; RECORD_BYTES * 2 - 5];
        let err = parse_batch(&bytes, 2).unwrap_err().to_string();
        assert!(err.contains(&(RECORD_BYTES * 2).to_string()), "{err}");
        assert!(err.contains(&(RECORD_BYTES * 2 - 5).to_string()), "{err}");
    }

    #[test]
    fn identity_augmentation_and_flip_involution() {
        let img: Vec<f64> = (0..IMAGE_BYTES).map(|i| i as f64).collect();
        assert_eq!(apply_augmentation(&img, Augmentation::IDENTITY), img);
        let flip = Augmentation {
            flip: true,
            ..Augmentation::IDENTITY
        };
        let once = apply_augmentation(&img, flip);
        assert_eq!(once[0], img[31]);
        assert_eq!(apply_augmentation(&once, flip), img);
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = epoch_batches(9, 4, &mut rng);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
    }
}
