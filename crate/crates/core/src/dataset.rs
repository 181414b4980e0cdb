//! Image datasets stored as a directory of raw float32 blobs.
//!
//! `dataset.json` holds the shared image shape and one record per image:
//! the blob file name (relative to the directory) and an optional integer
//! label. Each blob is `C*H*W` little-endian float32 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KseError, Result};
use crate::tensor::{FeatureStack, Shape};

pub const INDEX_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: FeatureStack,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Shape,
    samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    blob: String,
    #[serde(default)]
    label: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    shape: [usize; 3],
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(shape: Shape, samples: Vec<Sample>) -> Result<Self> {
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.image.shape() != shape) {
            return Err(KseError::Shape(format!(
                "sample {i} has shape {}, dataset expects {shape}",
                s.image.shape()
            )));
        }
        Ok(Self { shape, samples })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> impl Iterator<Item = &FeatureStack> {
        self.samples.iter().map(|s| &s.image)
    }

    /// Every sample with its label; errors if any label is missing.
    pub fn labeled(&self) -> Result<Vec<(&FeatureStack, usize)>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.label
                    .map(|l| (&s.image, l))
                    .ok_or_else(|| KseError::Config(format!("sample {i} has no label")))
            })
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| KseError::io(dir, e))?;
        let mut records = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("{i:06}.bin");
            let bytes: Vec<u8> = s.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&name);
            fs::write(&path, bytes).map_err(|e| KseError::io(&path, e))?;
            records.push(Record {
                blob: name,
                label: s.label,
            });
        }
        let index = Index {
            shape: [self.shape.channels, self.shape.height, self.shape.width],
            records,
        };
        let path = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, text + "\n").map_err(|e| KseError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| KseError::io(&path, e))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| KseError::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let [c, h, w] = index.shape;
        let shape = Shape::new(c, h, w);
        let mut samples = Vec::with_capacity(index.records.len());
        for r in index.records {
            let blob = dir.join(&r.blob);
            let bytes = fs::read(&blob).map_err(|e| KseError::io(&blob, e))?;
            if bytes.len() != shape.len() * 4 {
                let err = if bytes.len() < shape.len() * 4 {
                    KseError::Truncated {
                        path: blob,
                        expected: shape.len() * 4,
                        actual: bytes.len(),
                    }
                } else {
                    KseError::DimensionMismatch {
                        path: blob,
                        reason: format!("{} bytes for shape {shape}", bytes.len()),
                    }
                };
                return Err(err);
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            samples.push(Sample {
                image: FeatureStack::new(c, h, w, data)?,
                label: r.label,
            });
        }
        Self::new(shape, samples)
    }
}
