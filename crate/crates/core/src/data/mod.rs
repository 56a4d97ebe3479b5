//! Image datasets: IDX and CIFAR-10 binary loaders, a synthetic generator,
//! splits and augmentation.

mod augment;
mod split;

pub use augment::{geometric_augment, random_crop_tta, tta_predict, upsample, AugmentConfig, Resample, Warp};
pub use split::{kfold_split, ratio_split, FoldAssignment};

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;

/// Images `[N, H, W, ch]` scaled to `[0, 1]` with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim("dataset", images.shape(), &[labels.len(), 0, 0, 0]));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Validation(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, ch)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Contract(format!("empty subset of {}", self.name)));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!("index {bad} outside {} samples", self.len())));
        }
        Ok(Dataset {
            name: self.name.clone(),
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            Error::format(
                bytes.len(),
                format!("truncated {what}: header needs {} bytes, file has {}", offset + 4, bytes.len()),
            )
        })
}

pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<Dataset> {
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    parse_idx(&read(images_path)?, &read(labels_path)?, classes, name)
}

/// Parses an IDX image file (`u8`, rank 3) and its label file (`u8`, rank 1).
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize, name: impl Into<String>) -> Result<Dataset> {
    let magic = be_u32(images, 0, "image file")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(images, 4, "image file")? as usize;
    let rows = be_u32(images, 8, "image file")? as usize;
    let cols = be_u32(images, 12, "image file")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(4, format!("image file declares an empty {n}×{rows}×{cols} array")));
    }
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::format(4, "image dimensions overflow"))?;
    if images.len() != expected {
        return Err(Error::format(
            images.len().min(expected),
            format!("image file should be {expected} bytes, file has {}", images.len()),
        ));
    }

    let magic = be_u32(labels, 0, "label file")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(labels, 4, "label file")? as usize;
    if count != n {
        return Err(Error::format(4, format!("label file has {count} labels, image file has {n} images")));
    }
    if labels.len() != 8 + n {
        return Err(Error::format(
            labels.len().min(8 + n),
            format!("label file should be {} bytes, file has {}", 8 + n, labels.len()),
        ));
    }
    let label_vec: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    if let Some(i) = label_vec.iter().position(|&l| l >= classes) {
        return Err(Error::format(8 + i, format!("label {} out of range for {classes} classes", label_vec[i])));
    }
    let data = images[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(name, Tensor::new([n, rows, cols, 1], data)?, label_vec, classes)
}

pub fn load_cifar10_binary(paths: &[&Path]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = read(p)?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                chunk.len() - chunk.len() % CIFAR_RECORD,
                format!(
                    "{}: length {} is not a multiple of {CIFAR_RECORD}",
                    p.display(),
                    chunk.len()
                ),
            ));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes, "cifar10")
}

/// Records are a label byte followed by the red, green and blue 32×32 planes.
pub fn parse_cifar10(bytes: &[u8], name: impl Into<String>) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::format(0, "no CIFAR-10 records"));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = 32 * 32;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0.0; n * plane * 3];
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Validation(format!(
                "record {i} (byte {}) has label {}, expected 0..10",
                i * CIFAR_RECORD,
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        let img = &mut data[i * plane * 3..(i + 1) * plane * 3];
        for ch in 0..3 {
            for p in 0..plane {
                img[p * 3 + ch] = rec[1 + ch * plane + p] as f64 / 255.0;
            }
        }
    }
    Dataset::new(name, Tensor::new([n, 32, 32, 3], data)?, labels, 10)
}

/// Serializes a single-channel dataset as an IDX pair (images, labels).
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (h, w, ch) = ds.image_shape();
    if ch != 1 {
        return Err(Error::Contract(format!("IDX images are single-channel, dataset has {ch}")));
    }
    let mut images = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// Class-conditional images: class `k` lights a bar whose position and
/// orientation depend on `k`, on top of uniform noise of amplitude `noise`.
pub fn synthetic_dataset(
    n: usize,
    (h, w, ch): (usize, usize, usize),
    classes: usize,
    noise: f64,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if n == 0 || h < 2 || w < 2 || ch == 0 || classes < 2 {
        return Err(Error::Config(format!(
            "synthetic dataset needs n ≥ 1, images at least 2×2 and 2+ classes; got n={n}, {h}×{w}×{ch}, c={classes}"
        )));
    }
    let mut data = Vec::with_capacity(n * h * w * ch);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..classes);
        labels.push(k);
        let vertical = k % 2 == 1;
        let slots = classes.div_ceil(2);
        let span = if vertical { w } else { h };
        let pos = ((k / 2) * span) / slots;
        let width = (span / (2 * slots)).max(1);
        for y in 0..h {
            for x in 0..w {
                let along = if vertical { x } else { y };
                let on = along >= pos && along < pos + width;
                for _ in 0..ch {
                    let base = if on { 0.8 } else { 0.1 };
                    let v: f64 = base + noise * rng.random_range(-1.0..=1.0);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset::new("synthetic", Tensor::new([n, h, w, ch], data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn idx_pair(n: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n as u32, 28, 28] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..n * 784).map(|i| (i % 256) as u8));
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn single_idx_sample() {
        let (img, lab) = idx_pair(1, &[7]);
        let ds = parse_idx(&img, &lab, 10, "one").unwrap();
        assert_eq!(ds.images.shape(), &[1, 28, 28, 1]);
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.data()[255], 1.0);
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_count_mismatch_names_both_counts() {
        let (img, lab) = idx_pair(2, &[1, 2, 3]);
        let msg = parse_idx(&img, &lab, 10, "x").unwrap_err().to_string();
        assert!(msg.contains("3 labels") && msg.contains("2 images"), "{msg}");
    }

    #[test]
    fn idx_round_trip() {
        let mut rng = SeededRng::seed_from_u64(2);
        let ds = synthetic_dataset(5, (6, 7, 1), 3, 0.0, &mut rng).unwrap();
        let (img, lab) = encode_idx(&ds).unwrap();
        let back = parse_idx(&img, &lab, 3, "synthetic").unwrap();
        assert_eq!(back.labels, ds.labels);
        assert!(back.images.max_abs_diff(&ds.images) <= 0.5 / 255.0);
    }

    #[test]
    fn cifar_zero_record() {
        let ds = parse_cifar10(&vec![0u8; CIFAR_RECORD], "z").unwrap();
        assert_eq!(ds.images.shape(), &[1, 32, 32, 3]);
        assert!(ds.images.data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.labels, vec![0]);
    }

    #[test]
    fn cifar_channel_planes_become_interleaved() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 3;
        rec[1] = 255;
        rec[1 + 1024 + 1] = 51;
        let ds = parse_cifar10(&rec, "p").unwrap();
        assert_eq!(ds.images.data()[0], 1.0);
        assert_eq!(ds.images.data()[3 + 1], 0.2);
    }

    #[test]
    fn cifar_rejects_bad_label_and_length() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(matches!(parse_cifar10(&rec, "b"), Err(Error::Validation(_))));
        assert!(matches!(parse_cifar10(&rec[..100], "b"), Err(Error::Format { .. })));
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_dataset(20, (8, 8, 2), 4, 0.2, &mut SeededRng::seed_from_u64(9)).unwrap();
        let b = synthetic_dataset(20, (8, 8, 2), 4, 0.2, &mut SeededRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
