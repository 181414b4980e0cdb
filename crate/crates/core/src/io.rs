//! Model files: a JSON manifest next to a little-endian blob.
//!
//! A model stored under the stem `toy` is written as `toy.manifest.json`
//! plus `toy.bin`. The manifest lists every layer with its dimensions and
//! the byte range of its data inside the blob.
//!
//! Dense weight sections hold `N*C*Kh*Kw` float32 values. A compressed
//! section holds, in order:
//!
//! 1. `C` budgets as little-endian u16,
//! 2. every channel's centroids as float32, channel by channel,
//! 3. per channel with budget `q >= 2`, the `N` zero-based indices packed
//!    LSB-first at `ceil(log2 q)` bits each, padded to a byte boundary.
//!
//! Biases are always dense float32 sections.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KseError, Result};
use crate::model::{CompressedLayer, ConvKind, ConvLayer, Layer, ModelGraph, Payload};
use crate::tensor::{ConvGeometry, Shape, WeightTensor};

pub const DENSE_FORMAT: &str = "kse-dense";
pub const COMPRESSED_FORMAT: &str = "kse-compressed";
pub const FORMAT_VERSION: u32 = 1;

const MANIFEST_SUFFIX: &str = ".manifest.json";

/// Which on-disk flavour a model file uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Dense,
    Compressed,
}

impl Stage {
    fn format_name(self) -> &'static str {
        match self {
            Stage::Dense => DENSE_FORMAT,
            Stage::Compressed => COMPRESSED_FORMAT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Section {
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
enum PayloadRecord {
    Dense { offset: usize, bytes: usize },
    Compressed { offset: usize, bytes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvRecord {
    n_filters: usize,
    in_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    compress_exempt: bool,
    payload: PayloadRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Section>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerRecord {
    Conv(ConvRecord),
    FullyConnected(ConvRecord),
    Relu,
    AvgPool { size: usize, stride: usize },
    Flatten,
    ResidualAdd { from: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    input_shape: [usize; 3],
    blob: String,
    blob_bytes: usize,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    layers: Vec<LayerRecord>,
}

/// Manifest and blob locations for a model stem or manifest path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPaths {
    pub manifest: PathBuf,
    pub blob: PathBuf,
}

impl ModelPaths {
    /// Accepts either `dir/name` or `dir/name.manifest.json`.
    pub fn resolve(path: impl AsRef<Path>) -> Self {
        let path = path.as_ref();
        let s = path.to_string_lossy();
        let stem = s.strip_suffix(MANIFEST_SUFFIX).unwrap_or(&s).to_string();
        Self {
            manifest: PathBuf::from(format!("{stem}{MANIFEST_SUFFIX}")),
            blob: PathBuf::from(format!("{stem}.bin")),
        }
    }
}

/// Index bits stored per entry for a channel with budget `q`.
pub fn index_bits(q: usize) -> u32 {
    if q <= 1 {
        0
    } else {
        usize::BITS - (q - 1).leading_zeros()
    }
}

/// Bytes occupied by one channel's packed index stream.
pub fn packed_index_bytes(n_filters: usize, q: usize) -> usize {
    (n_filters * index_bits(q) as usize).div_ceil(8)
}

/// Size in bytes of a compressed layer's blob section.
pub fn compressed_section_bytes(layer: &CompressedLayer) -> usize {
    let header = 2 * layer.in_channels();
    let centroids = 4 * layer.total_kernels() * layer.kernel_len();
    let indices: usize = layer
        .budgets()
        .iter()
        .map(|&q| packed_index_bytes(layer.n_filters(), q))
        .sum();
    header + centroids + indices
}

fn pack_indices(values: &[u32], bits: u32, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + (values.len() * bits as usize).div_ceil(8), 0);
    let buf = &mut out[start..];
    let mut bitpos = 0usize;
    for &v in values {
        for b in 0..bits {
            if (v >> b) & 1 == 1 {
                buf[bitpos / 8] |= 1 << (bitpos % 8);
            }
            bitpos += 1;
        }
    }
}

fn unpack_indices(bytes: &[u8], count: usize, bits: u32) -> Vec<u32> {
    let mut bitpos = 0usize;
    (0..count)
        .map(|_| {
            let mut v = 0u32;
            for b in 0..bits {
                if (bytes[bitpos / 8] >> (bitpos % 8)) & 1 == 1 {
                    v |= 1 << b;
                }
                bitpos += 1;
            }
            v
        })
        .collect()
}

fn push_floats(out: &mut Vec<u8>, values: &[f32]) -> Section {
    let offset = out.len();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Section {
        offset,
        bytes: out.len() - offset,
    }
}

fn encode_compressed(layer: &CompressedLayer, out: &mut Vec<u8>) -> Result<Section> {
    let offset = out.len();
    for &q in layer.budgets() {
        let q16 = u16::try_from(q)
            .map_err(|_| KseError::Config(format!("budget {q} does not fit the u16 budget field")))?;
        out.extend_from_slice(&q16.to_le_bytes());
    }
    for c in 0..layer.in_channels() {
        push_floats(out, layer.channel_centroids(c));
    }
    for c in 0..layer.in_channels() {
        let bits = index_bits(layer.budget(c));
        if bits > 0 {
            pack_indices(layer.channel_indices(c), bits, out);
        }
    }
    Ok(Section {
        offset,
        bytes: out.len() - offset,
    })
}

fn build_manifest(m: &ModelGraph, stage: Stage, blob_name: String) -> Result<(Manifest, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(m.layers().len());
    for (i, layer) in m.layers().iter().enumerate() {
        let rec = match layer {
            Layer::Conv(conv) => {
                let payload = match (&conv.payload, stage) {
                    (Payload::Dense(w), Stage::Dense) => {
                        let s = push_floats(&mut blob, w.data());
                        PayloadRecord::Dense {
                            offset: s.offset,
                            bytes: s.bytes,
                        }
                    }
                    (Payload::Dense(w), Stage::Compressed) => {
                        if !conv.compress_exempt {
                            return Err(KseError::Stage(format!(
                                "layer {i} is not exempt but still dense; compress the model first"
                            )));
                        }
                        let s = push_floats(&mut blob, w.data());
                        PayloadRecord::Dense {
                            offset: s.offset,
                            bytes: s.bytes,
                        }
                    }
                    (Payload::Compressed(_), Stage::Dense) => {
                        return Err(KseError::Stage(format!(
                            "layer {i} is compressed; use the compressed format"
                        )));
                    }
                    (Payload::Compressed(c), Stage::Compressed) => {
                        let s = encode_compressed(c, &mut blob).map_err(|e| e.at_layer(i))?;
                        PayloadRecord::Compressed {
                            offset: s.offset,
                            bytes: s.bytes,
                        }
                    }
                };
                let bias = conv.bias.as_ref().map(|b| push_floats(&mut blob, b));
                let (kh, kw) = conv.payload.kernel_dims();
                let r = ConvRecord {
                    n_filters: conv.payload.n_filters(),
                    in_channels: conv.payload.in_channels(),
                    kernel: [kh, kw],
                    stride: [conv.geometry.stride.0, conv.geometry.stride.1],
                    padding: [conv.geometry.padding.0, conv.geometry.padding.1],
                    compress_exempt: conv.compress_exempt,
                    payload,
                    bias,
                };
                match conv.kind {
                    ConvKind::Conv => LayerRecord::Conv(r),
                    ConvKind::FullyConnected => LayerRecord::FullyConnected(r),
                }
            }
            Layer::Relu => LayerRecord::Relu,
            Layer::AvgPool { size, stride } => LayerRecord::AvgPool {
                size: *size,
                stride: *stride,
            },
            Layer::Flatten => LayerRecord::Flatten,
            Layer::ResidualAdd { from } => LayerRecord::ResidualAdd { from: *from },
        };
        records.push(rec);
    }
    let shape = m.input_shape();
    let manifest = Manifest {
        format: stage.format_name().to_string(),
        version: FORMAT_VERSION,
        input_shape: [shape.channels, shape.height, shape.width],
        blob: blob_name,
        blob_bytes: blob.len(),
        metadata: m.metadata.clone(),
        layers: records,
    };
    Ok((manifest, blob))
}

fn save(m: &ModelGraph, path: &Path, stage: Stage) -> Result<ModelPaths> {
    let paths = ModelPaths::resolve(path);
    let blob_name = paths
        .blob
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| KseError::Config(format!("invalid model path {}", path.display())))?;
    let (manifest, blob) = build_manifest(m, stage, blob_name)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&paths.manifest, text + "\n").map_err(|e| KseError::io(&paths.manifest, e))?;
    fs::write(&paths.blob, blob).map_err(|e| KseError::io(&paths.blob, e))?;
    Ok(paths)
}

/// Writes a model whose weight-bearing layers are all dense.
pub fn save_dense(m: &ModelGraph, path: impl AsRef<Path>) -> Result<ModelPaths> {
    save(m, path.as_ref(), Stage::Dense)
}

/// Writes a model whose non-exempt weight-bearing layers are all compressed.
pub fn save_compressed(m: &ModelGraph, path: impl AsRef<Path>) -> Result<ModelPaths> {
    save(m, path.as_ref(), Stage::Compressed)
}

/// Writes either flavour, chosen from the payloads.
pub fn save_model(m: &ModelGraph, path: impl AsRef<Path>) -> Result<ModelPaths> {
    if m.has_compressed_payloads() {
        save_compressed(m, path)
    } else {
        save_dense(m, path)
    }
}

struct BlobReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl BlobReader<'_> {
    fn slice(&self, offset: usize, len: usize) -> Result<&[u8]> {
        let end = offset.checked_add(len).ok_or_else(|| KseError::Manifest {
            path: self.path.to_path_buf(),
            reason: "section range overflows".into(),
        })?;
        if end > self.bytes.len() {
            return Err(KseError::Truncated {
                path: self.path.to_path_buf(),
                expected: end,
                actual: self.bytes.len(),
            });
        }
        Ok(&self.bytes[offset..end])
    }

    fn mismatch(&self, reason: String) -> KseError {
        KseError::DimensionMismatch {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn floats(&self, offset: usize, bytes: usize, count: usize, what: &str) -> Result<Vec<f32>> {
        if bytes != count * 4 {
            return Err(self.mismatch(format!(
                "{what} section is {bytes} bytes, dims require {}",
                count * 4
            )));
        }
        let raw = self.slice(offset, bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

fn decode_compressed(
    r: &BlobReader<'_>,
    rec: &ConvRecord,
    offset: usize,
    bytes: usize,
) -> Result<CompressedLayer> {
    let (n, c) = (rec.n_filters, rec.in_channels);
    let klen = rec.kernel[0] * rec.kernel[1];
    let section = r.slice(offset, bytes)?;
    if section.len() < 2 * c {
        return Err(r.mismatch(format!("compressed section too short for {c} budgets")));
    }
    let budgets: Vec<usize> = section[..2 * c]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    if let Some((ch, &q)) = budgets.iter().enumerate().find(|(_, &q)| q > n) {
        return Err(KseError::Corrupt(format!("channel {ch} budget {q} exceeds {n} filters")));
    }
    let total: usize = budgets.iter().sum();
    let index_bytes: usize = budgets.iter().map(|&q| packed_index_bytes(n, q)).sum();
    let expected = 2 * c + 4 * total * klen + index_bytes;
    if bytes != expected {
        return Err(r.mismatch(format!(
            "compressed section is {bytes} bytes, budgets require {expected}"
        )));
    }
    let mut pos = 2 * c;
    let mut centroids = Vec::with_capacity(c);
    for &q in &budgets {
        let len = 4 * q * klen;
        centroids.push(
            section[pos..pos + len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
        pos += len;
    }
    let mut indices = Vec::with_capacity(c);
    for (ch, &q) in budgets.iter().enumerate() {
        let bits = index_bits(q);
        if bits == 0 {
            indices.push(Vec::new());
            continue;
        }
        let len = packed_index_bytes(n, q);
        let values = unpack_indices(&section[pos..pos + len], n, bits);
        if let Some((f, &v)) = values.iter().enumerate().find(|(_, &v)| v as usize >= q) {
            return Err(KseError::Corrupt(format!(
                "index ({f}, {ch}) = {v} outside [0, {q})"
            )));
        }
        indices.push(values);
        pos += len;
    }
    CompressedLayer::new(n, c, (rec.kernel[0], rec.kernel[1]), budgets, centroids, indices)
}

fn decode_conv(r: &BlobReader<'_>, rec: &ConvRecord, kind: ConvKind, stage: Stage) -> Result<ConvLayer> {
    let geometry = ConvGeometry::new((rec.stride[0], rec.stride[1]), (rec.padding[0], rec.padding[1]))?;
    let (n, c, kh, kw) = (rec.n_filters, rec.in_channels, rec.kernel[0], rec.kernel[1]);
    let payload = match rec.payload {
        PayloadRecord::Dense { offset, bytes } => {
            let data = r.floats(offset, bytes, n * c * kh * kw, "weight")?;
            Payload::Dense(WeightTensor::new(n, c, kh, kw, data)?)
        }
        PayloadRecord::Compressed { offset, bytes } => {
            if stage == Stage::Dense {
                return Err(KseError::Stage("compressed payload inside a dense model file".into()));
            }
            Payload::Compressed(decode_compressed(r, rec, offset, bytes)?)
        }
    };
    let bias = match rec.bias {
        Some(s) => Some(r.floats(s.offset, s.bytes, n, "bias")?),
        None => None,
    };
    Ok(ConvLayer {
        kind,
        geometry,
        payload,
        bias,
        compress_exempt: rec.compress_exempt,
    })
}

fn read_manifest(path: &Path) -> Result<(ModelPaths, Manifest)> {
    let paths = ModelPaths::resolve(path);
    let text = fs::read_to_string(&paths.manifest).map_err(|e| KseError::io(&paths.manifest, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| KseError::Manifest {
        path: paths.manifest.clone(),
        reason: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(KseError::Manifest {
            path: paths.manifest.clone(),
            reason: format!("unsupported version {}", manifest.version),
        });
    }
    let blob = paths
        .manifest
        .parent()
        .map(|d| d.join(&manifest.blob))
        .unwrap_or_else(|| PathBuf::from(&manifest.blob));
    Ok((
        ModelPaths {
            manifest: paths.manifest,
            blob,
        },
        manifest,
    ))
}

/// Reports which flavour a model file uses without reading its blob.
pub fn probe_stage(path: impl AsRef<Path>) -> Result<Stage> {
    let (paths, manifest) = read_manifest(path.as_ref())?;
    match manifest.format.as_str() {
        DENSE_FORMAT => Ok(Stage::Dense),
        COMPRESSED_FORMAT => Ok(Stage::Compressed),
        other => Err(KseError::Manifest {
            path: paths.manifest,
            reason: format!("unknown format {other:?}"),
        }),
    }
}

fn load(path: &Path, want: Option<Stage>) -> Result<ModelGraph> {
    let stage = probe_stage(path)?;
    if let Some(want) = want {
        if want != stage {
            return Err(KseError::Stage(format!(
                "{} holds a {} model, expected {}",
                path.display(),
                stage.format_name(),
                want.format_name()
            )));
        }
    }
    let (paths, manifest) = read_manifest(path)?;
    let bytes = fs::read(&paths.blob).map_err(|e| KseError::io(&paths.blob, e))?;
    if bytes.len() < manifest.blob_bytes {
        return Err(KseError::Truncated {
            path: paths.blob.clone(),
            expected: manifest.blob_bytes,
            actual: bytes.len(),
        });
    }
    if bytes.len() > manifest.blob_bytes {
        return Err(KseError::DimensionMismatch {
            path: paths.blob.clone(),
            reason: format!(
                "blob has {} bytes, manifest claims {}",
                bytes.len(),
                manifest.blob_bytes
            ),
        });
    }
    let reader = BlobReader {
        path: &paths.blob,
        bytes: &bytes,
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, rec) in manifest.layers.iter().enumerate() {
        let layer = match rec {
            LayerRecord::Conv(r) => Layer::Conv(decode_conv(&reader, r, ConvKind::Conv, stage).map_err(|e| e.at_layer(i))?),
            LayerRecord::FullyConnected(r) => {
                Layer::Conv(decode_conv(&reader, r, ConvKind::FullyConnected, stage).map_err(|e| e.at_layer(i))?)
            }
            LayerRecord::Relu => Layer::Relu,
            LayerRecord::AvgPool { size, stride } => Layer::AvgPool {
                size: *size,
                stride: *stride,
            },
            LayerRecord::Flatten => Layer::Flatten,
            LayerRecord::ResidualAdd { from } => Layer::ResidualAdd { from: *from },
        };
        layers.push(layer);
    }
    let [c, h, w] = manifest.input_shape;
    ModelGraph::from_parts(Shape::new(c, h, w), layers, manifest.metadata).map_err(|e| match e {
        e @ (KseError::Shape(_) | KseError::Layer { .. } | KseError::Geometry(_)) => KseError::DimensionMismatch {
            path: paths.manifest.clone(),
            reason: e.to_string(),
        },
        e => e,
    })
}

pub fn load_dense(path: impl AsRef<Path>) -> Result<ModelGraph> {
    load(path.as_ref(), Some(Stage::Dense))
}

pub fn load_compressed(path: impl AsRef<Path>) -> Result<ModelGraph> {
    load(path.as_ref(), Some(Stage::Compressed))
}

/// Loads either flavour.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    load(path.as_ref(), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvGeometry;

    fn tiny_model() -> ModelGraph {
        let w = WeightTensor::from_fn(2, 1, 3, 3, |n, _, y, x| (n as f32) - (y * 3 + x) as f32 * 0.25).unwrap();
        ModelGraph::new(
            Shape::new(1, 4, 4),
            vec![Layer::Conv(ConvLayer::conv(w, ConvGeometry::uniform(1, 1).unwrap()))],
        )
        .unwrap()
    }

    #[test]
    fn one_layer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_model();
        let paths = save_dense(&m, dir.path().join("tiny")).unwrap();
        assert!(paths.manifest.ends_with("tiny.manifest.json"));
        assert_eq!(load_dense(dir.path().join("tiny")).unwrap(), m);
        assert_eq!(load_dense(&paths.manifest).unwrap(), m);
    }

    #[test]
    fn short_blob_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let paths = save_dense(&tiny_model(), dir.path().join("tiny")).unwrap();
        let mut bytes = fs::read(&paths.blob).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&paths.blob, bytes).unwrap();
        assert!(matches!(load_dense(&paths.manifest), Err(KseError::Truncated { .. })));
    }

    #[test]
    fn malformed_manifest_and_dims() {
        let dir = tempfile::tempdir().unwrap();
        let paths = save_dense(&tiny_model(), dir.path().join("tiny")).unwrap();
        let text = fs::read_to_string(&paths.manifest).unwrap();
        fs::write(&paths.manifest, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_dense(&paths.manifest), Err(KseError::Manifest { .. })));

        let bad = text.replacen("\"n_filters\": 2", "\"n_filters\": 3", 1);
        fs::write(&paths.manifest, bad).unwrap();
        let err = load_dense(&paths.manifest);
        assert!(matches!(err.as_ref().map_err(KseError::root), Err(KseError::DimensionMismatch { .. })), "{err:?}");
    }

    #[test]
    fn index_bits_values() {
        assert_eq!(index_bits(0), 0);
        assert_eq!(index_bits(1), 0);
        assert_eq!(index_bits(2), 1);
        assert_eq!(index_bits(3), 2);
        assert_eq!(index_bits(4), 2);
        assert_eq!(index_bits(5), 3);
        assert_eq!(index_bits(256), 8);
        assert_eq!(packed_index_bytes(8, 3), 2);
        assert_eq!(packed_index_bytes(8, 1), 0);
    }

    #[test]
    fn pack_unpack() {
        let vals: Vec<u32> = (0..13).map(|i| (i * 5) % 7).collect();
        let mut buf = Vec::new();
        pack_indices(&vals, 3, &mut buf);
        assert_eq!(buf.len(), (13 * 3usize).div_ceil(8));
        assert_eq!(unpack_indices(&buf, 13, 3), vals);
    }

    #[test]
    fn stage_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model();
        let w = m.conv(0).unwrap().payload.to_dense();
        m.set_payload(0, Payload::Compressed(CompressedLayer::identity(&w))).unwrap();
        assert!(matches!(save_dense(&m, dir.path().join("x")), Err(KseError::Stage(_))));
        save_compressed(&m, dir.path().join("x")).unwrap();
        assert!(matches!(load_dense(dir.path().join("x")), Err(KseError::Stage(_))));
        assert_eq!(load_compressed(dir.path().join("x")).unwrap(), m);
    }
}
