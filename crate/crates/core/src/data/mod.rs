//! Domain types and their on-disk formats.

pub mod concepts;
pub mod config;
pub mod embedding;
pub mod labels;

use crate::error::{Error, Result};

pub use concepts::{load_concepts, save_concepts, ConceptBank, ConceptEntry, ConceptRecord};
pub use config::{CblConfig, ExemplarConfig, ExplainConfig, FclConfig, InputPaths, PipelineConfig};
pub use embedding::{load_embeddings, normalize_rows, save_embeddings, EmbeddingMatrix};
pub use labels::{load_labels, save_labels, LabelVector};

/// Images, their binary concept labels and their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub image_embeddings: EmbeddingMatrix,
    /// `n x m` row-major, entries 0 or 1.
    pub concept_labels: Vec<u8>,
    pub num_concepts: usize,
    pub class_labels: LabelVector,
}

impl LabeledDataset {
    pub fn new(
        image_embeddings: EmbeddingMatrix,
        concept_labels: Vec<u8>,
        num_concepts: usize,
        class_labels: LabelVector,
    ) -> Result<Self> {
        let n = image_embeddings.rows();
        if class_labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} images but {} class labels",
                class_labels.len()
            )));
        }
        if concept_labels.len() != n * num_concepts {
            return Err(Error::DimensionMismatch(format!(
                "{n}x{num_concepts} concept labels need {} entries, got {}",
                n * num_concepts,
                concept_labels.len()
            )));
        }
        if concept_labels.iter().any(|&s| s > 1) {
            return Err(Error::Invalid("concept labels must be 0 or 1".into()));
        }
        Ok(Self {
            image_embeddings,
            concept_labels,
            num_concepts,
            class_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.image_embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concept_row(&self, i: usize) -> &[u8] {
        &self.concept_labels[i * self.num_concepts..(i + 1) * self.num_concepts]
    }

    /// Concept labels as a 0/1 EMB1-ready matrix (requires at least one concept).
    pub fn concept_label_matrix(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(
            self.len(),
            self.num_concepts,
            self.concept_labels.iter().map(|&s| f64::from(s)).collect(),
        )
    }
}
