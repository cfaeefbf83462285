//! Trained model bundle and its JSON envelope.
//!
//! Float arrays are stored as hex strings of little-endian `f64` bytes,
//! row-major, so a model round-trips bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::training::{predict, LinearHead, NormStats, SparseClassifier};

pub const MODEL_FORMAT: &str = "pscbm-model";

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    hex::encode(bytes)
}

pub fn decode_f64s(text: &str, expected: usize, field: &str) -> Result<Vec<f64>> {
    let bytes = hex::decode(text).map_err(|e| Error::Invalid(format!("{field}: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::DimensionMismatch(format!(
            "{field}: expected {expected} values, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadBlob {
    pub outputs: usize,
    pub inputs: usize,
    pub w: String,
    pub b: String,
}

impl HeadBlob {
    pub fn encode(head: &LinearHead) -> Self {
        Self {
            outputs: head.outputs,
            inputs: head.inputs,
            w: encode_f64s(&head.w),
            b: encode_f64s(&head.b),
        }
    }

    pub fn decode(&self, field: &str) -> Result<LinearHead> {
        LinearHead::new(
            self.outputs,
            self.inputs,
            decode_f64s(&self.w, self.outputs * self.inputs, &format!("{field}.w"))?,
            decode_f64s(&self.b, self.outputs, &format!("{field}.b"))?,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dims {
    pub embedding_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NormBlob {
    mu: String,
    sigma: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    dims: Dims,
    config: Value,
    concepts: Vec<String>,
    norm_stats: NormBlob,
    cbl: HeadBlob,
    fcl: HeadBlob,
    nnz: usize,
}

/// Bottleneck, normalization and final layer, plus concept names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub head: LinearHead,
    pub stats: NormStats,
    pub classifier: SparseClassifier,
    pub concepts: Vec<String>,
    /// Configuration echo stored alongside the weights.
    pub config: Value,
}

impl TrainedModel {
    pub fn new(
        head: LinearHead,
        stats: NormStats,
        classifier: SparseClassifier,
        concepts: Vec<String>,
        config: Value,
    ) -> Result<Self> {
        let m = head.outputs;
        if stats.mu.len() != m
            || stats.sigma.len() != m
            || classifier.num_features() != m
            || concepts.len() != m
        {
            return Err(Error::DimensionMismatch(format!(
                "model parts disagree on concept count ({m} bottleneck outputs)"
            )));
        }
        Ok(Self {
            head,
            stats,
            classifier,
            concepts,
            config,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            embedding_dim: self.head.inputs,
            num_concepts: self.head.outputs,
            num_classes: self.classifier.num_classes(),
        }
    }

    /// Normalized concept activations for one embedding.
    pub fn activations(&self, z: &[f64]) -> Vec<f64> {
        let mut h = self.head.apply(z);
        self.stats.normalize_into(&mut h);
        h
    }

    pub fn predict(&self, images: &EmbeddingMatrix) -> Result<LabelVector> {
        predict(&self.head, &self.stats, &self.classifier, images)
    }

    pub fn to_json_string(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: 1,
            dims: self.dims(),
            config: self.config.clone(),
            concepts: self.concepts.clone(),
            norm_stats: NormBlob {
                mu: encode_f64s(&self.stats.mu),
                sigma: encode_f64s(&self.stats.sigma),
            },
            cbl: HeadBlob::encode(&self.head),
            fcl: HeadBlob::encode(&self.classifier.head),
            nnz: self.classifier.nnz(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(json: &str, path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(json).map_err(|e| Error::json(path, e))?;
        if file.format != MODEL_FORMAT || file.version != 1 {
            return Err(Error::Invalid(format!(
                "{}: not a version-1 {MODEL_FORMAT} file",
                path.display()
            )));
        }
        let m = file.dims.num_concepts;
        let head = file.cbl.decode("cbl")?;
        let classifier = SparseClassifier {
            head: file.fcl.decode("fcl")?,
        };
        let stats = NormStats {
            mu: decode_f64s(&file.norm_stats.mu, m, "norm_stats.mu")?,
            sigma: decode_f64s(&file.norm_stats.sigma, m, "norm_stats.sigma")?,
        };
        if head.inputs != file.dims.embedding_dim
            || classifier.num_classes() != file.dims.num_classes
        {
            return Err(Error::DimensionMismatch(
                "model dims disagree with blobs".into(),
            ));
        }
        if classifier.nnz() != file.nnz {
            return Err(Error::Invalid(format!(
                "nnz field {} disagrees with weights ({})",
                file.nnz,
                classifier.nnz()
            )));
        }
        Self::new(head, stats, classifier, file.concepts, file.config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&json, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}
