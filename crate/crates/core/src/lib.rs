//! Partially shared concept bottleneck models over precomputed embeddings.
//!
//! Image and concept-text embeddings go in; a filtered and merged concept
//! bank, a linear concept bottleneck, a sparse final layer and evaluation
//! reports come out. Every stage is deterministic for a fixed seed.

pub mod affinity;
pub mod data;
pub mod error;
pub mod exemplars;
pub mod explain;
pub mod metrics;
pub mod pipeline;
pub mod pscs;
pub mod rng;
pub mod synth;
pub mod training;

pub use affinity::{class_scores, compute_affinity, AffinityMatrix, ClassScoreTable};
pub use data::{
    ConceptBank, ConceptEntry, EmbeddingMatrix, LabelVector, LabeledDataset, PipelineConfig,
};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{accuracy, cea, EvalReport};
pub use pscs::{
    concept_correlation, filter_concepts, greedy_merge, label_dataset, merge_concepts,
    prune_exclusive, CorrelationMatrix, MergeReport, StrategyMode,
};
pub use training::TrainedModel;
