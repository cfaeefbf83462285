//! Synthetic concept-generative classification tasks with known sharing.
//!
//! Ground-truth concepts are the rows of a seeded random orthonormal basis.
//! Class `y` owns `exclusive_per_class` concepts and a seeded subset of the
//! shared ones; an image of class `y` is the normalized mean of its concept
//! vectors plus isotropic Gaussian noise. Concept text embeddings are the
//! basis rows themselves, so in-class affinities are known in closed form
//! (`1 / sqrt(|K_y|)` at zero noise, for `|K_y|` concepts in class `y`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    save_embeddings, save_labels, ConceptBank, ConceptRecord, EmbeddingMatrix, InputPaths,
    LabelVector, PipelineConfig,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub shared_concepts: usize,
    pub exclusive_per_class: usize,
    /// Number of classes each shared concept is assigned to (at least 2).
    pub classes_per_shared: usize,
    /// Extra concept records per exclusive concept that reuse its vector
    /// under a different text.
    pub duplicates_per_exclusive: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            shared_concepts: 6,
            exclusive_per_class: 2,
            classes_per_shared: 3,
            duplicates_per_exclusive: 0,
            dim: 32,
            n_per_class: 100,
            n_test_per_class: 50,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn ground_truth_concepts(&self) -> usize {
        self.shared_concepts + self.num_classes * self.exclusive_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::out_of_range("num_classes", self.num_classes, ">= 2"));
        }
        if self.dim < self.ground_truth_concepts() {
            return Err(Error::out_of_range(
                "dim",
                self.dim,
                ">= number of ground-truth concepts",
            ));
        }
        if self.n_per_class == 0 || self.n_test_per_class == 0 {
            return Err(Error::out_of_range("n_per_class", 0, ">= 1"));
        }
        if self.shared_concepts > 0 && !(2..=self.num_classes).contains(&self.classes_per_shared) {
            return Err(Error::out_of_range(
                "classes_per_shared",
                self.classes_per_shared,
                "2..=num_classes",
            ));
        }
        if self.exclusive_per_class == 0 && self.shared_concepts == 0 {
            return Err(Error::Invalid("task has no concepts".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::out_of_range("noise_sigma", self.noise_sigma, ">= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub train_images: EmbeddingMatrix,
    pub train_labels: LabelVector,
    pub test_images: EmbeddingMatrix,
    pub test_labels: LabelVector,
    /// One row per concept record, in record order.
    pub texts: EmbeddingMatrix,
    pub records: Vec<ConceptRecord>,
    pub bank: ConceptBank,
    /// Ground-truth concept ids of each class (shared ids first).
    pub class_concepts: Vec<Vec<usize>>,
    /// Ground-truth concept id of each record.
    pub record_concept: Vec<usize>,
}

/// Seeded orthonormal rows via twice-applied modified Gram-Schmidt.
fn orthonormal_rows(count: usize, dim: usize, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn sample_images(
    spec: &SynthSpec,
    basis: &[Vec<f64>],
    class_concepts: &[Vec<usize>],
    per_class: usize,
    rng: &mut SplitMix64,
) -> Result<(EmbeddingMatrix, LabelVector)> {
    let d = spec.dim;
    let mut data = Vec::with_capacity(spec.num_classes * per_class * d);
    let mut labels = Vec::with_capacity(spec.num_classes * per_class);
    for (y, concepts) in class_concepts.iter().enumerate() {
        let mut mean = vec![0.0; d];
        for &k in concepts {
            mean.iter_mut().zip(&basis[k]).for_each(|(m, b)| *m += b);
        }
        let inv = 1.0 / concepts.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        for _ in 0..per_class {
            data.extend(
                mean.iter()
                    .map(|m| m + spec.noise_sigma * rng.next_gaussian()),
            );
            labels.push(y);
        }
    }
    let images = EmbeddingMatrix::new(labels.len(), d, data)?.normalize_rows()?;
    Ok((images, LabelVector::new(labels, spec.num_classes)?))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let (l, s, e) = (
        spec.num_classes,
        spec.shared_concepts,
        spec.exclusive_per_class,
    );
    let mut basis_rng = SplitMix64::stream(spec.seed, 1);
    let basis = orthonormal_rows(spec.ground_truth_concepts(), spec.dim, &mut basis_rng);

    let mut share_rng = SplitMix64::stream(spec.seed, 2);
    let all_classes: Vec<usize> = (0..l).collect();
    let mut shared_classes: Vec<Vec<usize>> = Vec::with_capacity(s);
    for _ in 0..s {
        let mut chosen = share_rng.sample(&all_classes, spec.classes_per_shared);
        chosen.sort_unstable();
        shared_classes.push(chosen);
    }
    let exclusive_id = |y: usize, k: usize| s + y * e + k;
    let class_concepts: Vec<Vec<usize>> = (0..l)
        .map(|y| {
            let mut ks: Vec<usize> = (0..s).filter(|&k| shared_classes[k].contains(&y)).collect();
            ks.extend((0..e).map(|k| exclusive_id(y, k)));
            ks
        })
        .collect();

    let mut records = Vec::new();
    let mut record_concept = Vec::new();
    for (k, classes) in shared_classes.iter().enumerate() {
        records.push(ConceptRecord {
            text: format!("shared attribute {k}"),
            classes: classes.clone(),
            embedding_row: None,
            aliases: Vec::new(),
        });
        record_concept.push(k);
    }
    for y in 0..l {
        for k in 0..e {
            for variant in 0..=spec.duplicates_per_exclusive {
                let text = if variant == 0 {
                    format!("class {y} attribute {k}")
                } else {
                    format!("class {y} attribute {k} variant {variant}")
                };
                records.push(ConceptRecord {
                    text,
                    classes: vec![y],
                    embedding_row: None,
                    aliases: Vec::new(),
                });
                record_concept.push(exclusive_id(y, k));
            }
        }
    }
    let text_data: Vec<f64> = record_concept
        .iter()
        .flat_map(|&k| basis[k].clone())
        .collect();
    let texts = EmbeddingMatrix::new(records.len(), spec.dim, text_data)?.normalize_rows()?;
    let bank = ConceptBank::from_records(l, &records)?;

    let mut train_rng = SplitMix64::stream(spec.seed, 3);
    let (train_images, train_labels) = sample_images(
        spec,
        &basis,
        &class_concepts,
        spec.n_per_class,
        &mut train_rng,
    )?;
    let mut test_rng = SplitMix64::stream(spec.seed, 4);
    let (test_images, test_labels) = sample_images(
        spec,
        &basis,
        &class_concepts,
        spec.n_test_per_class,
        &mut test_rng,
    )?;

    Ok(SynthData {
        spec: spec.clone(),
        train_images,
        train_labels,
        test_images,
        test_labels,
        texts,
        records,
        bank,
        class_concepts,
        record_concept,
    })
}

pub const TRAIN_EMBEDDINGS: &str = "train_images.emb";
pub const TEST_EMBEDDINGS: &str = "test_images.emb";
pub const TEXT_EMBEDDINGS: &str = "texts.emb";
pub const CONCEPTS: &str = "concepts.json";
pub const TRAIN_LABELS: &str = "train_labels.txt";
pub const TEST_LABELS: &str = "test_labels.txt";
pub const CONFIG: &str = "config.json";

impl SynthData {
    /// Input paths relative to the directory written by [`SynthData::write_dir`].
    pub fn input_paths() -> InputPaths {
        InputPaths {
            concepts: CONCEPTS.into(),
            text_embeddings: TEXT_EMBEDDINGS.into(),
            train_embeddings: TRAIN_EMBEDDINGS.into(),
            train_labels: TRAIN_LABELS.into(),
            test_embeddings: TEST_EMBEDDINGS.into(),
            test_labels: TEST_LABELS.into(),
            affinity_embeddings: None,
            test_affinity_embeddings: None,
        }
    }

    pub fn concept_json(&self) -> String {
        let doc = serde_json::json!({
            "num_classes": self.spec.num_classes,
            "concepts": self.records,
        });
        let mut s = serde_json::to_string_pretty(&doc).expect("records serialize");
        s.push('\n');
        s
    }

    /// Writes EMB1, concept JSON and label files plus a pipeline config that
    /// points at them.
    pub fn write_dir(&self, dir: &Path, config: &PipelineConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_embeddings(&self.train_images, dir.join(TRAIN_EMBEDDINGS))?;
        save_embeddings(&self.test_images, dir.join(TEST_EMBEDDINGS))?;
        save_embeddings(&self.texts, dir.join(TEXT_EMBEDDINGS))?;
        save_labels(&self.train_labels, dir.join(TRAIN_LABELS))?;
        save_labels(&self.test_labels, dir.join(TEST_LABELS))?;
        let concepts = dir.join(CONCEPTS);
        std::fs::write(&concepts, self.concept_json()).map_err(|e| Error::io(&concepts, e))?;
        let cfg = PipelineConfig {
            inputs: Self::input_paths(),
            ..config.clone()
        };
        let path = dir.join(CONFIG);
        let mut json = serde_json::to_string_pretty(&cfg).expect("config serializes");
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::compute_affinity;

    #[test]
    fn noiseless_affinities_are_analytic() {
        let spec = SynthSpec {
            num_classes: 4,
            shared_concepts: 0,
            exclusive_per_class: 1,
            dim: 6,
            n_per_class: 3,
            n_test_per_class: 1,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let a = compute_affinity(&data.train_images, &data.texts).unwrap();
        for i in 0..a.n() {
            let y = data.train_labels.get(i);
            for j in 0..a.m() {
                let expected = if j == y { 1.0 } else { 0.0 };
                assert!((a.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            n_per_class: 5,
            n_test_per_class: 2,
            seed: 17,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train_images, b.train_images);
        assert_eq!(a.texts, b.texts);
        assert_eq!(a.bank, b.bank);
        let c = generate(&SynthSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a.train_images, c.train_images);
    }

    #[test]
    fn sharing_structure() {
        let spec = SynthSpec {
            duplicates_per_exclusive: 2,
            n_per_class: 2,
            n_test_per_class: 1,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        assert_eq!(data.bank.len(), 6 + 10 * 2 * 3);
        for c in &data.bank.concepts()[..6] {
            assert_eq!(c.classes.len(), 3);
        }
        assert!(generate(&SynthSpec { dim: 20, ..spec }).is_err());
    }
}
