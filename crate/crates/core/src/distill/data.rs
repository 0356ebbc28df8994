//! Labeled image sets.
//!
//! Two sources are supported: a procedurally generated ten-class benchmark
//! (textures and outlines on noisy backgrounds, any square size) and the
//! CIFAR-10 binary format (`data_batch_*.bin`, `test_batch.bin`).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, 3, h, w]`, normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.batch() != labels.len() {
            return Err(Error::Shape(format!("{} labels for images of shape {:?}", labels.len(), images.shape())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label, classes: num_classes });
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.sample_shape();
        [s[0], s[1], s[2]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.images.select(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Samples `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        let idx: Vec<usize> = (start.min(end)..end).collect();
        let (images, labels) = self.batch(&idx);
        Self { images, labels, num_classes: self.num_classes }
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        (self.slice(0, n), self.slice(n, self.len()))
    }
}

/// Where a dataset comes from, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { samples: usize, side: usize, seed: u64 },
    Cifar10 { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { samples, side, seed } => synthetic(*samples, *side, *seed),
            DataSource::Cifar10 { path } => load_cifar10(path),
        }
    }
}

pub const SYNTHETIC_CLASSES: usize = 10;
const NOISE_STD: f64 = 0.12;

fn pattern(class: usize, u: f64, v: f64, period: f64, phase: f64) -> bool {
    let (r, stripe) = ((u * u + v * v).sqrt(), |t: f64| ((t / period + phase).rem_euclid(1.0)) < 0.5);
    match class {
        0 => u.abs() < 1.0 && v.abs() < 1.0 && stripe(v * 4.0),
        1 => u.abs() < 1.0 && v.abs() < 1.0 && stripe(u * 4.0),
        2 => u.abs() < 1.0 && v.abs() < 1.0 && stripe((u + v) * 2.8),
        3 => u.abs() < 1.0 && v.abs() < 1.0 && stripe((u - v) * 2.8),
        4 => u.abs() < 1.0 && v.abs() < 1.0 && (stripe(u * 4.0) ^ stripe(v * 4.0)),
        5 => r < 1.0,
        6 => (0.6..1.0).contains(&r),
        7 => u.abs().max(v.abs()) < 1.0 && u.abs().max(v.abs()) > 0.62,
        8 => (u.abs() < 0.28 && v.abs() < 1.0) || (v.abs() < 0.28 && u.abs() < 1.0),
        _ => r < 1.05 && ((u - v).abs() < 0.3 || (u + v).abs() < 0.3),
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

/// Balanced ten-class benchmark of `n` square `side x side` images.
pub fn synthetic(n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if side < 8 {
        return Err(Error::Shape(format!("synthetic images need side >= 8, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let plane = side * side;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SYNTHETIC_CLASSES;
        let s = side as f64;
        let (cx, cy) = (s * rng.random_range(0.3..0.7), s * rng.random_range(0.3..0.7));
        let radius = s * rng.random_range(0.2..0.38);
        let angle = rng.random_range(-0.25..0.25) * PI / 4.0;
        let period = rng.random_range(1.6..2.6);
        let phase = rng.random::<f64>();
        let bg = color(&mut rng);
        let mut fg = color(&mut rng);
        while fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() < 0.9 {
            fg = color(&mut rng);
        }
        let (sin, cos) = angle.sin_cos();
        let mut img = vec![0.0f64; 3 * plane];
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / radius, (y as f64 + 0.5 - cy) / radius);
                let (u, v) = (cos * dx - sin * dy, sin * dx + cos * dy);
                let c = if pattern(class, u, v, period, phase) { &fg } else { &bg };
                for ch in 0..3 {
                    img[ch * plane + y * side + x] = c[ch];
                }
            }
        }
        for v in &mut img {
            *v = ((*v + noise.sample(&mut rng)).clamp(0.0, 1.0) - 0.5) / 0.25;
        }
        data.extend(img.into_iter().map(|v| v as f32));
        labels.push(class);
    }
    Dataset::new(Tensor::from_vec(&[n, 3, side, side], data)?, labels, SYNTHETIC_CLASSES)
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Reads one CIFAR-10 binary batch file or every `*.bin` file in a directory (sorted by name).
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        files
    } else if path.exists() {
        vec![path.to_path_buf()]
    } else {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    };
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for file in &files {
        let bytes = fs::read(file)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::CorruptPayload(format!("{} is not a whole number of CIFAR-10 records", file.display())));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(record[0] as usize);
            for (ch, px) in record[1..].chunks_exact(plane).enumerate() {
                data.extend(px.iter().map(|&b| (b as f32 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]));
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = labels.len();
    Dataset::new(Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let a = synthetic(40, 32, 9).unwrap();
        let b = synthetic(40, 32, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image_shape(), [3, 32, 32]);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 4);
        }
        assert_ne!(a, synthetic(40, 32, 10).unwrap());
    }

    #[test]
    fn cifar_records_parse() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[CIFAR_RECORD] = 7;
        bytes[1] = 255;
        fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
        let d = load_cifar10(dir.path()).unwrap();
        assert_eq!(d.labels, vec![3, 7]);
        assert!((d.images.data()[0] - (1.0 - CIFAR_MEAN[0]) / CIFAR_STD[0]).abs() < 1e-6);
        fs::write(dir.path().join("data_batch_1.bin"), &bytes[..10]).unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::CorruptPayload(_))));
    }
}
