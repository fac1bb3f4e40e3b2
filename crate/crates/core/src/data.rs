//! CIFAR binary records, channel statistics and synthetic datasets.
//!
//! Record layout (bit-exact):
//!
//! * CIFAR-10: 1 label byte, then 3072 pixel bytes (1 + 3072 = 3073).
//! * CIFAR-100: coarse label byte, fine label byte, then 3072 pixel bytes.
//!
//! Pixels are stored as three 32×32 planes, R then G then B, each row-major.
//! Loaded values are `byte / 255`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

const PROTOTYPE_SEED: u64 = 0x5eed_c1a5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_size(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    fn train_files(self) -> Vec<&'static str> {
        match self {
            CifarVariant::Cifar10 => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => vec!["train.bin"],
        }
    }

    fn test_file(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100 => "test.bin",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 3, H, W]`, values in `[0, 1]` unless normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, name: &str) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Data(format!("images must be [N,3,H,W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                s[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Data(format!("label {bad} >= class count {class_count}")));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            name: name.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Images and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }
}

/// Parses CIFAR records from memory.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, name: &str) -> Result<Dataset> {
    let rec = variant.record_size();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Data(format!(
            "{} bytes is not a multiple of the {rec}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let k = variant.classes();
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        // CIFAR-100 keeps the fine label in the second byte.
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= k {
            return Err(Error::Data(format!("record {i}: label {label} >= {k}")));
        }
        labels.push(label);
        pixels.extend(r[variant.label_bytes()..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, k, name)
}

pub fn load_cifar(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_cifar(&bytes, variant, &name)
}

fn concat(parts: Vec<Dataset>, name: &str) -> Result<Dataset> {
    let k = parts[0].class_count;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in parts {
        labels.extend(p.labels);
        pixels.extend(p.images.into_data());
    }
    let n = labels.len();
    let images = Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, k, name)
}

/// Resolves the directory holding the `.bin` files, accepting either the
/// directory itself or its parent holding the standard extracted folder.
fn resolve_dir(dir: &Path, variant: CifarVariant) -> PathBuf {
    let nested = match variant {
        CifarVariant::Cifar10 => dir.join("cifar-10-batches-bin"),
        CifarVariant::Cifar100 => dir.join("cifar-100-binary"),
    };
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Loads the standard train and test splits from an extracted directory.
pub fn load_cifar_dir(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, variant);
    let train = variant
        .train_files()
        .into_iter()
        .map(|f| load_cifar(&dir.join(f), variant))
        .collect::<Result<Vec<_>>>()?;
    let train = concat(train, "train")?;
    let test = load_cifar(&dir.join(variant.test_file()), variant)?;
    Ok((train, test))
}

/// Encodes a 32×32 dataset back into CIFAR records. Pixel values are
/// quantized as `round(v * 255)`; CIFAR-100 coarse labels are written as 0.
pub fn encode_cifar(data: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if data.image_size() != (CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::Data("CIFAR records hold 32x32 images".into()));
    }
    if data.class_count > variant.classes() {
        return Err(Error::Data(format!(
            "{} classes do not fit {:?}",
            data.class_count, variant
        )));
    }
    let mut out = Vec::with_capacity(data.len() * variant.record_size());
    for (i, &y) in data.labels.iter().enumerate() {
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(y as u8);
        let px = &data.images.data()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        for &v in px {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Population mean and standard deviation of each channel over all pixels.
pub fn channel_stats(data: &Dataset) -> Result<([f64; 3], [f64; 3])> {
    if data.len() < 2 {
        return Err(Error::Data("channel statistics need at least 2 samples".into()));
    }
    let (h, w) = data.image_size();
    let plane = h * w;
    let px = data.images.data();
    let count = (data.len() * plane) as f64;
    let mut means = [0.0; 3];
    let mut stds = [0.0; 3];
    for c in 0..3 {
        let plane_iter = || (0..data.len()).flat_map(move |i| px[(i * 3 + c) * plane..(i * 3 + c + 1) * plane].iter());
        let mean = plane_iter().sum::<f64>() / count;
        let var = plane_iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        means[c] = mean;
        stds[c] = var.sqrt();
    }
    Ok((means, stds))
}

/// Deterministic dataset whose class is carried by a smooth colored
/// stripe pattern, mirror-symmetric left to right, plus Gaussian noise.
/// Labels cycle `0, 1, …, k-1`, so classes are balanced when `k | n`.
///
/// Class prototypes depend only on `k`; `seed` drives amplitude jitter and
/// noise, so datasets from different seeds are splits of one task.
pub fn synthetic(seed: u64, n: usize, k: usize, size: usize) -> Result<Dataset> {
    synthetic_with_noise(seed, n, k, size, 0.1)
}

pub fn synthetic_with_noise(seed: u64, n: usize, k: usize, size: usize, noise: f64) -> Result<Dataset> {
    if n == 0 || k == 0 || size == 0 {
        return Err(Error::Data("synthetic needs n, k, size >= 1".into()));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED);
    struct Proto {
        color: [f64; 3],
        fy: f64,
        fx: f64,
        phase: f64,
    }
    let protos: Vec<Proto> = (0..k)
        .map(|_| Proto {
            color: [
                proto_rng.random_range(-1.0..1.0),
                proto_rng.random_range(-1.0..1.0),
                proto_rng.random_range(-1.0..1.0),
            ],
            fy: proto_rng.random_range(0.5..2.5),
            fx: proto_rng.random_range(0.0..2.0),
            phase: proto_rng.random_range(0.0..2.0 * PI),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let side = size as f64;
    let mut pixels = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        let p = &protos[y];
        let amp: f64 = rng.random_range(0.7..1.3);
        for c in 0..3 {
            for r in 0..size {
                let vy = (2.0 * PI * (p.fy * (r as f64 + 0.5) / side) + p.phase).cos();
                for col in 0..size {
                    let u = (col as f64 + 0.5) / side - 0.5;
                    let vx = (2.0 * PI * p.fx * u).cos();
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let v = 0.5 + 0.2 * amp * p.color[c] * vy * vx + noise * z;
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(y);
    }
    let images = Tensor::from_vec(&[n, 3, size, size], pixels)?;
    Dataset::new(images, labels, k, &format!("synthetic-{seed}"))
}
