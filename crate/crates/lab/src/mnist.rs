//! IDX-format MNIST loading.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use sha2::{Digest, Sha256};

use crate::networks::PIXELS;

const IMAGES_MAGIC: u32 = 0x0803;
const LABELS_MAGIC: u32 = 0x0801;

/// Grayscale images scaled to `[0, 1]`, sample-major `[N, 784]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    /// The first `n` samples (all of them when `n` is 0 or too large).
    pub fn truncated(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        Dataset {
            images: self.images[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut images = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as usize);
        }
        (images, labels)
    }

    /// Hex SHA-256 of the pixel and label contents.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.images {
            h.update([(v * 255.0).round() as u8]);
        }
        h.update(&self.labels);
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

/// Cache root: `$RDPC_HOME`, else `~/.cache/rdpc`.
pub fn cache_dir() -> PathBuf {
    if let Some(p) = std::env::var_os("RDPC_HOME") {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME").map_or_else(|| PathBuf::from("."), PathBuf::from);
    home.join(".cache").join("rdpc")
}

/// MNIST directory: `$RDPC_MNIST_DIR`, else `<cache>/mnist`.
pub fn default_dir() -> PathBuf {
    std::env::var_os("RDPC_MNIST_DIR").map_or_else(|| cache_dir().join("mnist"), PathBuf::from)
}

impl Mnist {
    /// Loads the four standard files (`train-images-idx3-ubyte`, ...) from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let split = |prefix: &str| -> Result<Dataset> {
            let images = read_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
            let labels = read_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
            ensure!(
                images.len() == labels.len() * PIXELS,
                "{prefix}: {} images but {} labels",
                images.len() / PIXELS,
                labels.len()
            );
            Ok(Dataset { images, labels })
        };
        Ok(Self {
            train: split("train")?,
            test: split("t10k")?,
        })
    }

    pub fn load_default() -> Result<Self> {
        let dir = default_dir();
        Self::load(&dir).with_context(|| {
            format!(
                "MNIST not found under {} (set RDPC_MNIST_DIR to a directory holding the four IDX files)",
                dir.display()
            )
        })
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).context("truncated IDX header")?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn parse_images(bytes: &[u8]) -> Result<Vec<f32>> {
    if be_u32(bytes, 0)? != IMAGES_MAGIC {
        bail!("not an IDX image file");
    }
    let n = be_u32(bytes, 4)? as usize;
    let (rows, cols) = (be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    ensure!(rows * cols == PIXELS, "expected 28x28 images, found {rows}x{cols}");
    let body = &bytes[16..];
    ensure!(body.len() == n * PIXELS, "IDX image payload has {} bytes, expected {}", body.len(), n * PIXELS);
    Ok(body.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if be_u32(bytes, 0)? != LABELS_MAGIC {
        bail!("not an IDX label file");
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    ensure!(body.len() == n, "IDX label payload has {} bytes, expected {n}", body.len());
    ensure!(body.iter().all(|&l| l < 10), "label out of range");
    Ok(body.to_vec())
}

fn read_images(path: &Path) -> Result<Vec<f32>> {
    parse_images(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    parse_labels(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
}
