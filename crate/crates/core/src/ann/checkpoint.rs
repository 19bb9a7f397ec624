//! Binary model container.
//!
//! Layout: `b"SFRG"`, u32 LE version, u64 LE header length, a JSON header,
//! zero padding up to a 64-byte boundary, then the data section. Every tensor
//! starts at a 64-byte aligned offset (relative to the data section) and is
//! stored as little-endian binary32.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AnnError, AnnModel, ConvBnBlock, Layer, LinearHead, QcfsActivation};
use crate::convert::{NeuronModel, SnnModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFRG";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (this build reads version {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Model(#[from] AnnError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Ann,
    Snn,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerHeader {
    Block {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        lambda: f32,
        clip_hi: u32,
    },
    AvgPool {
        size: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Threshold {
    Layer(f32),
    PerChannel(Vec<f32>),
}

#[derive(Debug, Serialize, Deserialize)]
struct SnnHeader {
    timesteps: u32,
    neuron: NeuronModel,
    theta: Vec<Threshold>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    input_shape: [usize; 3],
    q_steps: u32,
    classes: usize,
    layers: Vec<LayerHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snn: Option<SnnHeader>,
    tensors: Vec<TensorEntry>,
}

/// A model read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Ann(AnnModel),
    Snn(SnnModel),
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn collect_tensors(model: &AnnModel) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (i, b) in model.blocks().enumerate() {
        out.push((format!("block{i}.weight"), b.weight.shape().to_vec(), b.weight.data().to_vec()));
        for (name, v) in [("mu", &b.mu), ("sigma", &b.sigma), ("gamma", &b.gamma), ("beta", &b.beta)] {
            out.push((format!("block{i}.{name}"), vec![v.len()], v.clone()));
        }
    }
    let hw = &model.head.weight;
    out.push(("head.weight".into(), hw.shape().to_vec(), hw.data().to_vec()));
    out.push(("head.bias".into(), vec![model.head.bias.len()], model.head.bias.clone()));
    out
}

fn encode(model: &AnnModel, kind: Kind, snn: Option<SnnHeader>) -> Vec<u8> {
    let layers = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Block(b) => LayerHeader::Block {
                in_channels: b.in_channels(),
                out_channels: b.out_channels(),
                kernel: b.kernel(),
                stride: b.stride,
                padding: b.padding,
                lambda: b.activation.lambda,
                clip_hi: b.activation.clip_hi,
            },
            Layer::AvgPool(size) => LayerHeader::AvgPool { size: *size },
        })
        .collect();
    let tensors = collect_tensors(model);
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset = align(offset + data.len() * 4);
    }
    let header = Header {
        kind,
        input_shape: model.input_shape,
        q_steps: model.q_steps(),
        classes: model.classes(),
        layers,
        snn,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(align(out.len()), 0);
    let data_start = out.len();
    for ((_, _, data), entry) in tensors.iter().zip(&header.tensors) {
        out.resize(data_start + entry.offset, 0);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_ann(model: &AnnModel) -> Vec<u8> {
    encode(model, Kind::Ann, None)
}

pub fn save_snn(model: &SnnModel) -> Vec<u8> {
    let snn = SnnHeader {
        timesteps: model.timesteps,
        neuron: model.neuron,
        theta: model.thresholds.iter().map(|&t| Threshold::Layer(t)).collect(),
    };
    encode(&model.network, Kind::Snn, Some(snn))
}

fn take(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or(CheckpointError::Truncated {
        needed: start + len,
        have: bytes.len(),
    })
}

pub fn load(bytes: &[u8]) -> Result<ModelFile> {
    let magic: [u8; 4] = take(bytes, 0, 4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let hlen = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(bytes, 16, hlen)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let data_start = align(16 + hlen);

    let mut tensors = std::collections::HashMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset % ALIGN != 0 {
            return Err(CheckpointError::Header(format!(
                "tensor {} offset {} is not 64-byte aligned",
                e.name, e.offset
            )));
        }
        let raw = take(bytes, data_start + e.offset, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| CheckpointError::Header(format!("tensor {}: {err}", e.name)))?;
        tensors.insert(e.name.clone(), t);
    }
    let mut get = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| CheckpointError::Header(format!("missing tensor {name}")))
    };

    let mut layers = Vec::new();
    let mut block_idx = 0;
    for l in &header.layers {
        match *l {
            LayerHeader::Block {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                lambda,
                clip_hi,
            } => {
                let i = block_idx;
                block_idx += 1;
                let weight = get(format!("block{i}.weight"))?;
                if weight.shape() != [out_channels, in_channels, kernel, kernel] {
                    return Err(CheckpointError::Header(format!(
                        "block{i}.weight has shape {:?}",
                        weight.shape()
                    )));
                }
                layers.push(Layer::Block(ConvBnBlock {
                    weight,
                    stride,
                    padding,
                    mu: get(format!("block{i}.mu"))?.into_data(),
                    sigma: get(format!("block{i}.sigma"))?.into_data(),
                    gamma: get(format!("block{i}.gamma"))?.into_data(),
                    beta: get(format!("block{i}.beta"))?.into_data(),
                    activation: QcfsActivation::new(lambda, header.q_steps, clip_hi)?,
                }));
            }
            LayerHeader::AvgPool { size } => layers.push(Layer::AvgPool(size)),
        }
    }
    let head = LinearHead {
        weight: get("head.weight".into())?,
        bias: get("head.bias".into())?.into_data(),
    };
    let network = AnnModel::new(layers, head, header.input_shape)?;
    if network.classes() != header.classes {
        return Err(CheckpointError::Header(format!(
            "header says {} classes, head has {}",
            header.classes,
            network.classes()
        )));
    }

    match (header.kind, header.snn) {
        (Kind::Ann, None) => Ok(ModelFile::Ann(network)),
        (Kind::Snn, Some(snn)) => {
            let thresholds = snn
                .theta
                .into_iter()
                .enumerate()
                .map(|(i, t)| match t {
                    Threshold::Layer(v) => Ok(v),
                    Threshold::PerChannel(_) => Err(CheckpointError::Header(format!(
                        "per-channel thresholds are not supported (block {i})"
                    ))),
                })
                .collect::<Result<Vec<f32>>>()?;
            Ok(ModelFile::Snn(SnnModel::new(
                network,
                thresholds,
                snn.timesteps,
                snn.neuron,
            )?))
        }
        (Kind::Ann, Some(_)) | (Kind::Snn, None) => Err(CheckpointError::Header(
            "kind does not match presence of spiking parameters".into(),
        )),
    }
}

pub fn load_ann(bytes: &[u8]) -> Result<AnnModel> {
    match load(bytes)? {
        ModelFile::Ann(m) => Ok(m),
        ModelFile::Snn(_) => Err(CheckpointError::WrongKind {
            expected: "ANN",
            found: "SNN",
        }),
    }
}

pub fn load_snn(bytes: &[u8]) -> Result<SnnModel> {
    match load(bytes)? {
        ModelFile::Snn(m) => Ok(m),
        ModelFile::Ann(_) => Err(CheckpointError::WrongKind {
            expected: "SNN",
            found: "ANN",
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> AnnModel {
        let mut arch = Architecture::new([2, 8, 8], vec![3, 5], 4, 16);
        arch.pool_after = vec![1];
        arch.random(&mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn ann_roundtrip_is_bit_identical() {
        let m = model();
        let bytes = save_ann(&m);
        assert_eq!(load_ann(&bytes).unwrap(), m);
        assert_eq!(save_ann(&load_ann(&bytes).unwrap()), bytes);
    }

    #[test]
    fn tensors_are_aligned() {
        let bytes = save_ann(&model());
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert!(header.tensors.iter().all(|t| t.offset % 64 == 0));
        assert_eq!(align(16 + hlen) % 64, 0);
    }

    #[test]
    fn distinct_errors() {
        let bytes = save_ann(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            load(&bad),
            Err(CheckpointError::UnsupportedVersion { found: 7 })
        ));
        assert!(matches!(
            load(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(load(&bytes[..2]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(
            load_snn(&bytes),
            Err(CheckpointError::WrongKind { .. })
        ));
    }
}
