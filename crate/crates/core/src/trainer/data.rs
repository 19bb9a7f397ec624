//! Datasets: IDX files and a deterministic synthetic image task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("IDX file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, pixel values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.batch() != labels.len() {
            return Err(DataError::Invalid(format!(
                "images {:?} vs {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self {
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

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self
            .images
            .select_batch(indices)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    pub fn take(&self, n: usize) -> Result<Self> {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Deterministic split: the last `ceil(len·fraction)` samples are held out.
    pub fn split(&self, fraction: f64) -> Result<(Self, Self)> {
        let held = ((self.len() as f64) * fraction).ceil() as usize;
        let cut = self.len() - held.min(self.len());
        let train: Vec<usize> = (0..cut).collect();
        let test: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Index order of one epoch.
    pub fn shuffled_indices(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DataError::Truncated {
            needed: at + 4,
            have: bytes.len(),
        })
}

/// Parses an IDX tensor. Unsigned-byte payloads (type 0x08) are scaled by
/// 1/255; big-endian float payloads (type 0x0D) are taken as-is. Returns the
/// extents and values.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let magic = be_u32(bytes, 0)?;
    let dtype = (magic >> 8) & 0xff;
    let ndim = (magic & 0xff) as usize;
    if magic >> 16 != 0 || ndim == 0 || !(dtype == 0x08 || dtype == 0x0D) {
        return Err(DataError::BadMagic(magic));
    }
    let dims = (0..ndim)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let start = 4 + 4 * ndim;
    let width = if dtype == 0x08 { 1 } else { 4 };
    let payload = bytes.get(start..start + n * width).ok_or(DataError::Truncated {
        needed: start + n * width,
        have: bytes.len(),
    })?;
    let values = if dtype == 0x08 {
        payload.iter().map(|&b| b as f32 / 255.0).collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };
    Ok((dims, values))
}

/// Images from an IDX file: `[N, H, W]` becomes `[N, 1, H, W]`; `[N, C, H, W]`
/// is kept.
pub fn load_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let (dims, values) = parse_idx(bytes)?;
    let shape = match dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        other => {
            return Err(DataError::Invalid(format!(
                "image file must have 3 or 4 dimensions, got {other:?}"
            )))
        }
    };
    Tensor::new(shape, values).map_err(|e| DataError::Invalid(e.to_string()))
}

/// Labels from a one-dimensional unsigned-byte IDX file.
pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(DataError::BadMagic(magic));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = bytes.get(8..8 + n).ok_or(DataError::Truncated {
        needed: 8 + n,
        have: bytes.len(),
    })?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Unsigned-byte IDX encoding of `[N, H, W]` or `[N, C, H, W]` images in
/// `[0, 1]` (values are rounded to the nearest 1/255).
pub fn encode_idx_images(images: &Tensor) -> Vec<u8> {
    let dims: Vec<usize> = match images.shape() {
        [n, 1, h, w] => vec![*n, *h, *w],
        s => s.to_vec(),
    };
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend(
        images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Gaussian blobs on a 1×8×8 canvas: class `k` puts a bright spot near
/// angle `2πk/classes` on a circle around the centre. Positions jitter and
/// pixels carry additive noise; samples cycle through the classes.
pub fn gen_synthetic(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    if classes < 2 || n == 0 {
        return Err(DataError::Invalid(format!(
            "need at least 2 classes and 1 sample, got {classes} and {n}"
        )));
    }
    const SIDE: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.4).expect("valid std");
    let noise = Normal::new(0.0, 0.08).expect("valid std");
    let centre = (SIDE as f64 - 1.0) / 2.0;
    let radius = 2.3;
    let width = 1.2f64;
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        let cx = centre + radius * angle.cos() + jitter.sample(&mut rng);
        let cy = centre + radius * angle.sin() + jitter.sample(&mut rng);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = (-d2 / (2.0 * width * width)).exp() + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(k);
    }
    let images = Tensor::new(vec![n, 1, SIDE, SIDE], data).expect("synthetic shape");
    Dataset::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_header_parse_and_scaling() {
        let mut bytes = vec![0, 0, 0x08, 0x03];
        for d in [10u32, 8, 8] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend(std::iter::repeat_n(255u8, 640));
        let t = load_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[10, 1, 8, 8]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn idx_errors() {
        assert!(matches!(
            load_idx_images(&[0, 0, 0x09, 3, 0, 0, 0, 1]),
            Err(DataError::BadMagic(_))
        ));
        assert!(matches!(
            load_idx_images(&[0, 0, 0x08, 3, 0, 0, 0, 10]),
            Err(DataError::Truncated { .. })
        ));
        assert!(load_idx_labels(&[0, 0, 0x08, 3]).is_err());
    }

    #[test]
    fn float_idx() {
        let mut bytes = vec![0, 0, 0x0D, 0x01, 0, 0, 0, 2];
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        bytes.extend_from_slice(&(-3.0f32).to_be_bytes());
        assert_eq!(parse_idx(&bytes).unwrap(), (vec![2], vec![0.25, -3.0]));
    }

    #[test]
    fn encode_roundtrip() {
        let ds = gen_synthetic(1, 6, 3).unwrap();
        let imgs = load_idx_images(&encode_idx_images(&ds.images)).unwrap();
        assert!(imgs.max_abs_diff(&ds.images).unwrap() <= 0.5 / 255.0 + 1e-6);
        assert_eq!(load_idx_labels(&encode_idx_labels(&ds.labels)).unwrap(), ds.labels);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(5, 40, 4).unwrap();
        assert_eq!(a, gen_synthetic(5, 40, 4).unwrap());
        assert_ne!(a, gen_synthetic(6, 40, 4).unwrap());
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.labels[..5], [0, 1, 2, 3, 0]);
    }

    #[test]
    fn split_is_deterministic() {
        let d = gen_synthetic(1, 10, 2).unwrap();
        let (tr, te) = d.split(0.25).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        assert_eq!(te.labels, d.labels[7..]);
    }
}
