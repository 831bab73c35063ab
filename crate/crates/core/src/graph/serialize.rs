//! On-disk model format.
//!
//! A model is two files: `<name>.manifest`, a pretty-printed JSON document with
//! the structure, hyper-parameters and the byte layout of every tensor, and
//! `<name>.weights`, the raw little-endian `f32` blob. The manifest stores the
//! blob length and its CRC-64/XZ checksum.

use std::fs;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use super::{Layer, LayerKind, LayerOp, LayerShape, ModelGraph, Node, ResidualBlock, Shortcut};
use crate::error::{Error, FormatError, Result};
use crate::ops::{BatchNormParams, ConvGeometry, LayerParams};
use crate::tensor::Tensor4;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_EXTENSION: &str = "manifest";
pub const WEIGHTS_EXTENSION: &str = "weights";
const CHECKSUM_ALGORITHM: &str = "crc-64/xz";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// CRC-64/XZ of a weight blob.
pub fn weights_checksum(blob: &[u8]) -> u64 {
    CRC64.checksum(blob)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    input_shape: [usize; 3],
    class_count: usize,
    bn_epsilon: f32,
    bn_momentum: f32,
    weights_file: String,
    blob_bytes: u64,
    checksum_algorithm: String,
    checksum: String,
    nodes: Vec<ManifestNode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
enum ManifestNode {
    Layer(ManifestLayer),
    Block {
        id: String,
        stage: usize,
        body: Vec<ManifestLayer>,
        shortcut: ManifestShortcut,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestShortcut {
    Identity,
    IdentityPad { stride: usize },
    Projection { conv: ManifestLayer, bn: Option<ManifestLayer> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLayer {
    id: String,
    stage: usize,
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<ConvGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<LayerShape>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tensors: Vec<TensorEntry>,
}

/// Location of one tensor inside the blob, in bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    offset: u64,
    bytes: u64,
}

struct BlobWriter {
    blob: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, dims: &[usize], values: &[f32]) -> TensorEntry {
        let offset = self.blob.len() as u64;
        for v in values {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        TensorEntry {
            name: name.to_string(),
            dims: dims.to_vec(),
            offset,
            bytes: (values.len() * 4) as u64,
        }
    }
}

fn encode_layer(layer: &Layer, w: &mut BlobWriter) -> ManifestLayer {
    let mut tensors = Vec::new();
    let mut geometry = None;
    match &layer.op {
        LayerOp::Conv { geometry: g, params } => {
            geometry = Some(*g);
            tensors.push(w.push("weights", &params.weights.dims(), params.weights.data()));
            tensors.push(w.push("bias", &[params.bias.len()], &params.bias));
        }
        LayerOp::Linear { params } => {
            tensors.push(w.push("weights", &params.weights.dims(), params.weights.data()));
            tensors.push(w.push("bias", &[params.bias.len()], &params.bias));
        }
        LayerOp::BatchNorm { params } => {
            let n = [params.channels()];
            tensors.push(w.push("gamma", &n, &params.gamma));
            tensors.push(w.push("beta", &n, &params.beta));
            tensors.push(w.push("running_mean", &n, &params.running_mean));
            tensors.push(w.push("running_var", &n, &params.running_var));
        }
        LayerOp::Relu | LayerOp::MaxPool | LayerOp::AvgPool | LayerOp::Softmax => {}
    }
    ManifestLayer {
        id: layer.id.clone(),
        stage: layer.stage,
        kind: layer.kind(),
        geometry,
        shape: layer.shape,
        tensors,
    }
}

/// Encodes a graph into its manifest text and weight blob.
fn encode(graph: &ModelGraph, weights_file: &str) -> Result<(String, Vec<u8>)> {
    let mut w = BlobWriter { blob: Vec::new() };
    let nodes = graph
        .nodes
        .iter()
        .map(|node| match node {
            Node::Layer(l) => ManifestNode::Layer(encode_layer(l, &mut w)),
            Node::Block(b) => {
                let body = b.body.iter().map(|l| encode_layer(l, &mut w)).collect();
                let shortcut = match &b.shortcut {
                    Shortcut::Identity => ManifestShortcut::Identity,
                    Shortcut::IdentityPad { stride } => ManifestShortcut::IdentityPad { stride: *stride },
                    Shortcut::Projection { conv, bn } => ManifestShortcut::Projection {
                        conv: encode_layer(conv, &mut w),
                        bn: bn.as_ref().map(|l| encode_layer(l, &mut w)),
                    },
                };
                ManifestNode::Block {
                    id: b.id.clone(),
                    stage: b.stage,
                    body,
                    shortcut,
                }
            }
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: graph.name.clone(),
        input_shape: graph.input_shape,
        class_count: graph.class_count,
        bn_epsilon: graph.bn_epsilon,
        bn_momentum: graph.bn_momentum,
        weights_file: weights_file.to_string(),
        blob_bytes: w.blob.len() as u64,
        checksum_algorithm: CHECKSUM_ALGORITHM.to_string(),
        checksum: format!("{:016x}", weights_checksum(&w.blob)),
        nodes,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invariant(e.to_string()))?;
    Ok((text + "\n", w.blob))
}

/// Paths and checksum of a written model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFiles {
    pub manifest: PathBuf,
    pub weights: PathBuf,
    pub checksum: u64,
}

/// Writes `<dir>/<name>.manifest` and `<dir>/<name>.weights`.
pub fn serialize(graph: &ModelGraph, dir: &Path, name: &str) -> Result<ModelFiles> {
    let weights_name = format!("{name}.{WEIGHTS_EXTENSION}");
    let (text, blob) = encode(graph, &weights_name)?;
    fs::create_dir_all(dir)?;
    let manifest = dir.join(format!("{name}.{MANIFEST_EXTENSION}"));
    let weights = dir.join(&weights_name);
    fs::write(&weights, &blob)?;
    fs::write(&manifest, text)?;
    Ok(ModelFiles {
        manifest,
        weights,
        checksum: weights_checksum(&blob),
    })
}

struct BlobReader<'a> {
    blob: &'a [u8],
    path: &'a Path,
}

impl BlobReader<'_> {
    fn malformed(&self, message: String) -> Error {
        FormatError::Manifest {
            path: self.path.to_path_buf(),
            message,
        }
        .into()
    }

    fn take(&self, layer: &str, entries: &[TensorEntry], name: &str, expected_len: Option<usize>) -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| self.malformed(format!("{layer}: missing tensor {name}")))?;
        let count: usize = entry.dims.iter().product();
        if entry.bytes != (count * 4) as u64 {
            return Err(self.malformed(format!("{layer}.{name}: {} bytes for dims {:?}", entry.bytes, entry.dims)));
        }
        if let Some(n) = expected_len {
            if count != n {
                return Err(self.malformed(format!("{layer}.{name}: expected {n} values, found {count}")));
            }
        }
        let start = entry.offset as usize;
        let end = start
            .checked_add(entry.bytes as usize)
            .filter(|&e| e <= self.blob.len())
            .ok_or_else(|| self.malformed(format!("{layer}.{name}: byte range outside the blob")))?;
        let values = self.blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok((entry.dims.clone(), values))
    }

    fn dense(&self, m: &ManifestLayer) -> Result<LayerParams> {
        let (dims, values) = self.take(&m.id, &m.tensors, "weights", None)?;
        let dims: [usize; 4] = dims
            .try_into()
            .map_err(|_| self.malformed(format!("{}: weights must be 4-D", m.id)))?;
        let (_, bias) = self.take(&m.id, &m.tensors, "bias", Some(dims[0]))?;
        LayerParams::new(Tensor4::from_vec(dims, values)?, bias)
    }

    fn layer(&self, m: &ManifestLayer) -> Result<Layer> {
        let op = match m.kind {
            LayerKind::Conv => LayerOp::Conv {
                geometry: m
                    .geometry
                    .ok_or_else(|| self.malformed(format!("{}: conv without geometry", m.id)))?,
                params: self.dense(m)?,
            },
            LayerKind::Linear => LayerOp::Linear { params: self.dense(m)? },
            LayerKind::BatchNorm => {
                let (dims, gamma) = self.take(&m.id, &m.tensors, "gamma", None)?;
                let n = dims.first().copied().unwrap_or(0);
                let (_, beta) = self.take(&m.id, &m.tensors, "beta", Some(n))?;
                let (_, running_mean) = self.take(&m.id, &m.tensors, "running_mean", Some(n))?;
                let (_, running_var) = self.take(&m.id, &m.tensors, "running_var", Some(n))?;
                LayerOp::BatchNorm {
                    params: BatchNormParams {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    },
                }
            }
            LayerKind::Relu => LayerOp::Relu,
            LayerKind::MaxPool => LayerOp::MaxPool,
            LayerKind::AvgPool => LayerOp::AvgPool,
            LayerKind::Softmax => LayerOp::Softmax,
        };
        Ok(Layer {
            id: m.id.clone(),
            stage: m.stage,
            op,
            shape: m.shape,
        })
    }
}

fn decode(manifest: &Manifest, blob: &[u8], path: &Path) -> Result<ModelGraph> {
    let reader = BlobReader { blob, path };
    let mut graph = ModelGraph::new(manifest.name.clone(), manifest.input_shape, manifest.class_count);
    graph.bn_epsilon = manifest.bn_epsilon;
    graph.bn_momentum = manifest.bn_momentum;
    for node in &manifest.nodes {
        match node {
            ManifestNode::Layer(l) => graph.push_layer(reader.layer(l)?),
            ManifestNode::Block { id, stage, body, shortcut } => {
                let body = body.iter().map(|l| reader.layer(l)).collect::<Result<Vec<_>>>()?;
                let shortcut = match shortcut {
                    ManifestShortcut::Identity => Shortcut::Identity,
                    ManifestShortcut::IdentityPad { stride } => Shortcut::IdentityPad { stride: *stride },
                    ManifestShortcut::Projection { conv, bn } => Shortcut::Projection {
                        conv: reader.layer(conv)?,
                        bn: bn.as_ref().map(|l| reader.layer(l)).transpose()?,
                    },
                };
                graph.push_block(ResidualBlock {
                    id: id.clone(),
                    stage: *stage,
                    body,
                    shortcut,
                });
            }
        }
    }
    Ok(graph)
}

/// Reads a model from its manifest path; the weight blob is resolved relative
/// to the manifest's directory.
pub fn deserialize(manifest_path: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(manifest_path)?;
    let malformed = |message: String| -> Error {
        FormatError::Manifest {
            path: manifest_path.to_path_buf(),
            message,
        }
        .into()
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(FormatError::VersionMismatch {
            found: found as u32,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if manifest.checksum_algorithm != CHECKSUM_ALGORITHM {
        return Err(malformed(format!("unknown checksum algorithm {}", manifest.checksum_algorithm)));
    }
    let expected = u64::from_str_radix(&manifest.checksum, 16).map_err(|e| malformed(format!("checksum: {e}")))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let blob = fs::read(dir.join(&manifest.weights_file))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(FormatError::TruncatedBlob {
            declared: manifest.blob_bytes,
            actual: blob.len() as u64,
        }
        .into());
    }
    let actual = weights_checksum(&blob);
    if actual != expected {
        return Err(FormatError::ChecksumMismatch { expected, actual }.into());
    }
    decode(&manifest, &blob, manifest_path)
}
