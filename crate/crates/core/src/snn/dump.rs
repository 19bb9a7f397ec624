//! Bit-packed spike train files, one per layer.
//!
//! Layout (all integers little-endian u32 unless noted):
//! `b"SPKP"`, version, T, ndim, `ndim` extents, one byte bit-order flag
//! (0 = element `i` of a plane lives in byte `i/8`, bit `i%8`, least
//! significant bit first), three zero bytes, then T planes in emission order,
//! each `ceil(numel/8)` bytes.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SPKP";
pub const VERSION: u32 = 1;
pub const BIT_ORDER_LSB_FIRST: u8 = 0;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed spike file: {0}")]
    Format(String),
}

/// Decoded spike train of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTrain {
    pub shape: Vec<usize>,
    /// One `Vec<bool>` per time step, row-major.
    pub planes: Vec<Vec<bool>>,
}

impl SpikeTrain {
    pub fn from_planes<S: Scalar>(planes: &[Tensor<S>]) -> Result<Self, DumpError> {
        let shape = planes
            .first()
            .map(|p| p.shape().to_vec())
            .ok_or_else(|| DumpError::Format("no planes".into()))?;
        let planes = planes
            .iter()
            .map(|p| {
                if p.shape() != shape.as_slice() {
                    return Err(DumpError::Format("planes differ in shape".into()));
                }
                p.data()
                    .iter()
                    .map(|&v| {
                        if v == S::one() {
                            Ok(true)
                        } else if v == S::zero() {
                            Ok(false)
                        } else {
                            Err(DumpError::Format(format!("non-binary spike value {v}")))
                        }
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { shape, planes })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.planes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&[BIT_ORDER_LSB_FIRST, 0, 0, 0]);
        for plane in &self.planes {
            let mut bytes = vec![0u8; plane.len().div_ceil(8)];
            for (i, &b) in plane.iter().enumerate() {
                if b {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DumpError> {
        let word = |i: usize| -> Result<u32, DumpError> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| DumpError::Format("truncated header".into()))
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(DumpError::Format("bad magic".into()));
        }
        if word(4)? != VERSION {
            return Err(DumpError::Format(format!("unsupported version {}", word(4)?)));
        }
        let t = word(8)? as usize;
        let ndim = word(12)? as usize;
        let shape = (0..ndim)
            .map(|d| word(16 + 4 * d).map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let flag_at = 16 + 4 * ndim;
        match bytes.get(flag_at) {
            Some(&BIT_ORDER_LSB_FIRST) => {}
            Some(other) => return Err(DumpError::Format(format!("unknown bit order {other}"))),
            None => return Err(DumpError::Format("truncated header".into())),
        }
        let numel: usize = shape.iter().product();
        let per = numel.div_ceil(8);
        let start = flag_at + 4;
        if bytes.len() != start + t * per {
            return Err(DumpError::Format(format!(
                "expected {} bytes, found {}",
                start + t * per,
                bytes.len()
            )));
        }
        let planes = (0..t)
            .map(|k| {
                let base = start + k * per;
                (0..numel)
                    .map(|i| bytes[base + i / 8] >> (i % 8) & 1 == 1)
                    .collect()
            })
            .collect();
        Ok(Self { shape, planes })
    }
}

/// Writes `layerNN.spk` for every layer into `dir`, creating it if needed.
pub fn write_spike_dump(dir: &Path, layers: &[SpikeTrain]) -> Result<Vec<PathBuf>, DumpError> {
    fs::create_dir_all(dir).map_err(|source| DumpError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    layers
        .iter()
        .enumerate()
        .map(|(i, train)| {
            let path = dir.join(format!("layer{i:02}.spk"));
            fs::write(&path, train.encode()).map_err(|source| DumpError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_bit_order() {
        let p0 = Tensor::new(vec![1, 3, 3], vec![1.0f32, 0., 0., 0., 0., 0., 0., 0., 1.]).unwrap();
        let p1 = Tensor::new(vec![1, 3, 3], vec![0.0f32, 1., 1., 0., 0., 0., 0., 0., 0.]).unwrap();
        let train = SpikeTrain::from_planes(&[p0, p1]).unwrap();
        let bytes = train.encode();
        let header = 4 + 4 + 4 + 4 + 3 * 4 + 4;
        assert_eq!(bytes.len(), header + 2 * 2);
        assert_eq!(&bytes[header..header + 2], &[0b0000_0001, 0b0000_0001]);
        assert_eq!(&bytes[header + 2..], &[0b0000_0110, 0]);
        assert_eq!(SpikeTrain::decode(&bytes).unwrap(), train);
    }

    #[test]
    fn rejects_garbage() {
        assert!(SpikeTrain::decode(b"nope").is_err());
        let p = Tensor::new(vec![2], vec![0.5f32, 1.0]).unwrap();
        assert!(SpikeTrain::from_planes(&[p]).is_err());
    }
}
