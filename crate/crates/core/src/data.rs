//! Training data: IDX image/label files and a seeded synthetic generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, IdxError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `(N, C, H, W)` scaled to `[0, 1]` with one class index each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(invalid!("images must be (N, C, H, W), got {:?}", images.shape()));
        }
        if images.shape()[0] != labels.len() {
            return Err(invalid!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(invalid!("label {bad} out of range for {class_count} classes"));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch of valid samples");
        (images, labels)
    }

    /// Sample order for `epoch`: a permutation reproducible from
    /// `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| IdxError::Corrupt(format!("truncated header at byte {at}")))
}

/// Parses an IDX image file: returns `(count, height, width, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Corrupt("file shorter than its magic".into()));
    }
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::NotIdx(magic));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    if h == 0 || w == 0 {
        return Err(IdxError::Corrupt(format!("image extent {h}x{w}")));
    }
    let len = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| IdxError::Corrupt("dimensions overflow".into()))?;
    let pixels = &bytes[16..];
    if pixels.len() < len {
        return Err(IdxError::Corrupt(format!(
            "expected {len} pixel bytes, found {}",
            pixels.len()
        )));
    }
    Ok((n, h, w, &pixels[..len]))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Corrupt("file shorter than its magic".into()));
    }
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::NotIdx(magic));
    }
    let n = be_u32(bytes, 4)? as usize;
    let labels = &bytes[8..];
    if labels.len() < n {
        return Err(IdxError::Corrupt(format!(
            "expected {n} label bytes, found {}",
            labels.len()
        )));
    }
    Ok(&labels[..n])
}

/// Builds a dataset from raw IDX image and label file contents.
pub fn idx_from_bytes(images: &[u8], labels: &[u8], limit: Option<usize>, name: &str) -> Result<Dataset> {
    let (n, h, w, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let keep = limit.map_or(n, |l| l.min(n));
    if keep == 0 {
        return Err(invalid!("dataset {name} has no samples"));
    }
    let data: Vec<f32> = pixels[..keep * h * w].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = labels[..keep].iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    let images = Tensor::new(vec![keep, 1, h, w], data)?;
    Dataset::new(images, labels, class_count, name)
}

/// Loads big-endian IDX image (`0x00000803`) and label (`0x00000801`) files.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    idx_from_bytes(&images, &labels, limit, &images_path.display().to_string())
}

/// Parameters of [`synth_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n: usize,
    pub class_count: usize,
    pub image_size: usize,
    /// Inverse noise level: Gaussian noise has standard deviation
    /// `1 / separation`. Infinity gives noiseless templates.
    pub separation: f64,
}

const BACKGROUND: f32 = 0.2;
const FOREGROUND: f32 = 0.8;

/// Template of `class`: a bar through the image center at angle
/// `pi * class / class_count`.
pub fn synth_template(class: usize, class_count: usize, size: usize) -> Vec<f32> {
    let angle = std::f64::consts::PI * class as f64 / class_count as f64;
    let (dy, dx) = angle.sin_cos();
    let center = (size as f64 - 1.0) / 2.0;
    let half_width = (size as f64 / 8.0).max(0.75);
    let mut t = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 - center, x as f64 - center);
            // distance to the line through the center with direction (dx, dy)
            let dist = (px * dy - py * dx).abs();
            t.push(if dist <= half_width { FOREGROUND } else { BACKGROUND });
        }
    }
    t
}

/// Deterministic classification data: each class is an oriented bar plus
/// seeded Gaussian noise, clamped to `[0, 1]`. Labels are balanced and
/// shuffled by the seed.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.class_count < 2 {
        return Err(invalid!("synthetic data needs at least 2 classes"));
    }
    if spec.n == 0 || spec.image_size < 2 {
        return Err(invalid!("synthetic data needs n >= 1 and image_size >= 2"));
    }
    if spec.separation.is_nan() || spec.separation <= 0.0 {
        return Err(invalid!("separation must be positive"));
    }
    let size = spec.image_size;
    let templates: Vec<Vec<f32>> = (0..spec.class_count)
        .map(|c| synth_template(c, spec.class_count, size))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.class_count).collect();
    labels.shuffle(&mut rng);
    let sigma = 1.0 / spec.separation;
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid!("noise level: {e}"))?;
    let mut data = Vec::with_capacity(spec.n * size * size);
    for &label in &labels {
        for &v in &templates[label] {
            let noise = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            data.push((v as f64 + noise).clamp(0.0, 1.0) as f32);
        }
    }
    let images = Tensor::new(vec![spec.n, 1, size, size], data)?;
    Dataset::new(
        images,
        labels,
        spec.class_count,
        format!("synth:{}:{}:{}:{}:{}", spec.seed, spec.n, spec.class_count, size, spec.separation),
    )
}
