//! Dataset ingestion and batching: IDX files, a synthetic grating dataset
//! for fast runs, per-channel normalization, flip/crop augmentation, and
//! deterministic per-epoch shuffling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `n * height * width * channels` bytes, row-major.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_count: usize,
}

impl Dataset {
    fn validate(self) -> Result<Self> {
        if self.n == 0 {
            return Err(Error::Format("dataset holds no samples".to_string()));
        }
        if self.labels.len() != self.n {
            return Err(Error::Format(format!(
                "{} labels for {} images",
                self.labels.len(),
                self.n
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| (l as usize) >= self.class_count) {
            return Err(Error::Format(format!(
                "label {bad} outside {} classes",
                self.class_count
            )));
        }
        Ok(self)
    }

    pub fn image_bytes(&self, idx: usize) -> &[u8] {
        let stride = self.height * self.width * self.channels;
        &self.images[idx * stride..(idx + 1) * stride]
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx] as usize
    }

    /// Per-channel mean/std over the whole dataset (0-255 scale).
    pub fn normalizer(&self) -> Normalizer {
        let ch = self.channels;
        let mut sum = vec![0.0f64; ch];
        let mut sum_sq = vec![0.0f64; ch];
        let count = (self.n * self.height * self.width) as f64;
        for (i, &px) in self.images.iter().enumerate() {
            let c = i % ch;
            let v = px as f64;
            sum[c] += v;
            sum_sq[c] += v * v;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / count - m * m).max(0.0)).sqrt().max(1e-6))
            .collect();
        Normalizer { mean, std }
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("file truncated inside header".to_string()))
}

/// Parse an IDX image/label file pair (big-endian dims, magic 0x803/0x801).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    if read_be_u32(&img_bytes, 0)? != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic in {}",
            images_path.display()
        )));
    }
    let n = read_be_u32(&img_bytes, 4)? as usize;
    let height = read_be_u32(&img_bytes, 8)? as usize;
    let width = read_be_u32(&img_bytes, 12)? as usize;
    let expected = 16 + n * height * width;
    if img_bytes.len() != expected {
        return Err(Error::Format(format!(
            "image file holds {} bytes, header implies {expected}",
            img_bytes.len()
        )));
    }

    if read_be_u32(&lbl_bytes, 0)? != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic in {}",
            labels_path.display()
        )));
    }
    let n_labels = read_be_u32(&lbl_bytes, 4)? as usize;
    if lbl_bytes.len() != 8 + n_labels {
        return Err(Error::Format(format!(
            "label file holds {} bytes, header implies {}",
            lbl_bytes.len(),
            8 + n_labels
        )));
    }
    if n_labels != n {
        return Err(Error::Format(format!(
            "image file has {n} samples but label file has {n_labels}"
        )));
    }

    let labels = lbl_bytes[8..].to_vec();
    let class_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    Dataset {
        images: img_bytes[16..].to_vec(),
        labels,
        n,
        height,
        width,
        channels: 1,
        class_count,
    }
    .validate()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Synthetic classification set: each class is a sinusoidal grating with a
/// class-specific orientation and frequency, plus Gaussian pixel noise
/// (sigma 25 on the 0-255 scale). Classes are separable by a linear probe.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::config(format!(
            "synthetic dataset needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.per_class == 0 || spec.image_size == 0 {
        return Err(Error::config(
            "per_class and image_size must be positive".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f64, 25.0).expect("valid sigma");
    let size = spec.image_size;
    let n = spec.classes * spec.per_class;
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        let theta = std::f64::consts::PI * class as f64 / spec.classes as f64;
        let freq = 2.0 + (class % 3) as f64;
        let class_phase = std::f64::consts::TAU * class as f64 / spec.classes as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        for _ in 0..spec.per_class {
            // fixed class template; jitter stays small so the classes remain
            // linearly separable
            let phase = class_phase + rng.gen_range(-0.5..0.5);
            let amplitude = rng.gen_range(60.0..100.0);
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * ct + y as f64 * st) / size as f64;
                    let base =
                        127.5 + amplitude * (std::f64::consts::TAU * freq * u + phase).sin();
                    let px = base + noise.sample(&mut rng);
                    images.push(px.clamp(0.0, 255.0) as u8);
                }
            }
            labels.push(class as u8);
        }
    }
    Dataset {
        images,
        labels,
        n,
        height: size,
        width: size,
        channels: 1,
        class_count: spec.classes,
    }
    .validate()
}

#[derive(Clone, Debug)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Assemble a normalized `[B, H, W, C]` batch. In train mode each image gets
/// a random horizontal flip (p = 0.5) and a random crop from a 4-pixel
/// zero-padded canvas; eval mode normalizes only.
pub fn normalize_and_augment(
    ds: &Dataset,
    indices: &[usize],
    norm: &Normalizer,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>) {
    const PAD: usize = 4;
    let (h, w, ch) = (ds.height, ds.width, ds.channels);
    let stride = h * w * ch;
    let mut data = vec![0.0f64; indices.len() * stride];
    let mut labels = Vec::with_capacity(indices.len());
    for (bi, &idx) in indices.iter().enumerate() {
        let src = ds.image_bytes(idx);
        labels.push(ds.label(idx));
        let (flip, dy, dx) = if train_mode {
            (
                rng.gen_bool(0.5),
                rng.gen_range(0..=2 * PAD) as isize - PAD as isize,
                rng.gen_range(0..=2 * PAD) as isize - PAD as isize,
            )
        } else {
            (false, 0, 0)
        };
        let out = &mut data[bi * stride..(bi + 1) * stride];
        for y in 0..h {
            for x in 0..w {
                // source pixel for this output position; shifts off the
                // canvas read as zero padding
                let sx = if flip { w - 1 - x } else { x } as isize + dx;
                let sy = y as isize + dy;
                for c in 0..ch {
                    let v = if sx >= 0 && (sx as usize) < w && sy >= 0 && (sy as usize) < h {
                        src[(sy as usize * w + sx as usize) * ch + c] as f64
                    } else {
                        0.0
                    };
                    out[(y * w + x) * ch + c] = (v - norm.mean[c]) / norm.std[c];
                }
            }
        }
    }
    let t = Tensor::new(vec![indices.len(), h, w, ch], data)
        .expect("batch buffer sized from shape");
    (t, labels)
}

/// Deterministic permutation of `0..n` for a given (seed, epoch).
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Batches over a fixed index order. Training drops the final partial batch;
/// evaluation keeps it.
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
}

impl BatchIterator {
    pub fn new(order: Vec<usize>, batch_size: usize, drop_last: bool) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        BatchIterator { order, batch_size, drop_last, pos: 0 }
    }

    /// Sequential (unshuffled) batches over a dataset.
    pub fn sequential(n: usize, batch_size: usize) -> Self {
        Self::new((0..n).collect(), batch_size, false)
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        if self.drop_last && end - self.pos < self.batch_size {
            return None;
        }
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}
