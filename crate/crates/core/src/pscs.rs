//! Partially shared concept strategy: filtering, greedy merging, exclusive
//! pruning and concept labeling, plus the independent and globally shared
//! labeling variants.
//!
//! Every function that takes an [`AffinityMatrix`] together with a
//! [`ConceptBank`] expects the matrix to be aligned with the bank: column `j`
//! holds concept `j` (see [`AffinityMatrix::for_bank`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::affinity::{AffinityMatrix, ClassScoreTable};
use crate::data::{ConceptBank, ConceptEntry, EmbeddingMatrix, LabelVector, LabeledDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    /// Each class owns its concepts; shared concepts are duplicated per class.
    Independent,
    /// Merged concepts serve exactly the classes they came from.
    PartiallyShared,
    /// Every concept may fire for every class.
    GloballyShared,
}

impl StrategyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyMode::Independent => "independent",
            StrategyMode::PartiallyShared => "partially_shared",
            StrategyMode::GloballyShared => "globally_shared",
        }
    }
}

/// Keeps `(j, y)` when `score(j, y) > tau_conf`; drops concepts left with no class.
pub fn filter_concepts(
    bank: &ConceptBank,
    scores: &ClassScoreTable,
    tau_conf: f64,
) -> Result<ConceptBank> {
    let mut kept = Vec::new();
    for (j, concept) in bank.concepts().iter().enumerate() {
        let mut classes = Vec::new();
        for &y in &concept.classes {
            let score = scores.get(j, y).ok_or_else(|| {
                Error::Invalid(format!("no class score for concept {j}, class {y}"))
            })?;
            if score > tau_conf {
                classes.push(y);
            }
        }
        if !classes.is_empty() {
            kept.push(ConceptEntry {
                classes,
                ..concept.clone()
            });
        }
    }
    Ok(bank.with_concepts(kept))
}

/// Symmetric `m x m` matrix of cosine similarities between affinity columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    m: usize,
    data: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn new(m: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * m {
            return Err(Error::DimensionMismatch(format!(
                "{m}x{m} correlation needs {} values, got {}",
                m * m,
                data.len()
            )));
        }
        Ok(Self { m, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Column cosine similarities of `affinity`. The diagonal is exactly 1 and
/// entries are clamped to `[-1, 1]`.
pub fn concept_correlation(affinity: &AffinityMatrix) -> Result<CorrelationMatrix> {
    let (n, m) = (affinity.n(), affinity.m());
    // Column-major copy so each pair is a contiguous dot product.
    let mut cols = vec![0.0; n * m];
    for i in 0..n {
        for (j, &v) in affinity.row(i).iter().enumerate() {
            cols[j * n + i] = v;
        }
    }
    let col = |j: usize| &cols[j * n..(j + 1) * n];
    // Squared norms share the dot product's summation order, so identical
    // columns give exactly 1.
    let mut sq_norms = Vec::with_capacity(m);
    for j in 0..m {
        let sq = crate::affinity::dot(col(j), col(j));
        if sq == 0.0 {
            return Err(Error::ZeroColumn { concept: j });
        }
        sq_norms.push(sq);
    }
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        data[i * m + i] = 1.0;
        for j in i + 1..m {
            let q = (crate::affinity::dot(col(i), col(j)) / (sq_norms[i] * sq_norms[j]).sqrt())
                .clamp(-1.0, 1.0);
            data[i * m + j] = q;
            data[j * m + i] = q;
        }
    }
    CorrelationMatrix::new(m, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    /// Surviving concept indices (into the input bank), in selection order.
    pub kept: Vec<usize>,
    /// Removed concept index -> representative it was merged into.
    pub merged_into: BTreeMap<usize, usize>,
    /// Correlation between each removed concept and its representative.
    pub q_stats: Option<QStats>,
}

/// Greedy merge: repeatedly picks the remaining concept whose set
/// `S_j = {i remaining : Q[i][j] > tau}` is largest (lowest index on ties),
/// keeps it, and removes it together with `S_j`. `Q` is never recomputed.
///
/// Survivors keep their own text and embedding row, take the union of the
/// merged class sets, and list the merged texts as aliases.
pub fn merge_concepts(
    bank: &ConceptBank,
    q: &CorrelationMatrix,
    tau_merge: f64,
) -> Result<(ConceptBank, MergeReport)> {
    let m = bank.len();
    if q.m() != m {
        return Err(Error::DimensionMismatch(format!(
            "correlation is {}x{}, bank has {m} concepts",
            q.m(),
            q.m()
        )));
    }
    let (kept, merged_into) = greedy_merge(q, tau_merge);

    let mut groups: BTreeMap<usize, Vec<usize>> = kept.iter().map(|&k| (k, Vec::new())).collect();
    for (&removed, &rep) in &merged_into {
        groups
            .get_mut(&rep)
            .expect("representative is kept")
            .push(removed);
    }
    let mut out = Vec::with_capacity(kept.len());
    for &rep in &kept {
        let mut entry = bank.get(rep).clone();
        for &member in &groups[&rep] {
            let other = bank.get(member);
            entry.classes.extend(other.classes.iter().copied());
            entry.aliases.push(other.text.clone());
            entry.aliases.extend(other.aliases.iter().cloned());
        }
        entry.classes.sort_unstable();
        entry.classes.dedup();
        out.push(entry);
    }

    let merged_q: Vec<f64> = merged_into.iter().map(|(&i, &j)| q.get(i, j)).collect();
    let q_stats = (!merged_q.is_empty()).then(|| QStats {
        min: merged_q.iter().copied().fold(f64::INFINITY, f64::min),
        max: merged_q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: merged_q.iter().sum::<f64>() / merged_q.len() as f64,
    });
    Ok((
        bank.with_concepts(out),
        MergeReport {
            kept,
            merged_into,
            q_stats,
        },
    ))
}

/// Index-level greedy merge over a correlation matrix, in `O(m^2)`.
/// Returns survivors in selection order and the removed -> survivor map.
pub fn greedy_merge(q: &CorrelationMatrix, tau_merge: f64) -> (Vec<usize>, BTreeMap<usize, usize>) {
    let m = q.m();
    let mut remaining = vec![true; m];
    // counts[j] = |{i remaining : Q[i][j] > tau}|
    let mut counts: Vec<usize> = (0..m)
        .map(|j| (0..m).filter(|&i| q.get(i, j) > tau_merge).count())
        .collect();
    let mut left = m;
    let mut kept = Vec::new();
    let mut merged_into = BTreeMap::new();
    while left > 0 {
        let mut best: Option<usize> = None;
        for j in (0..m).filter(|&j| remaining[j]) {
            match best {
                Some(b) if counts[b] >= counts[j] => {}
                _ => best = Some(j),
            }
        }
        let c_max = best.expect("a concept remains");
        let mut removed: Vec<usize> = (0..m)
            .filter(|&i| remaining[i] && q.get(i, c_max) > tau_merge)
            .collect();
        if !removed.contains(&c_max) {
            removed.push(c_max);
        }
        for &i in &removed {
            remaining[i] = false;
            left -= 1;
            if i != c_max {
                merged_into.insert(i, c_max);
            }
            for (j, count) in counts.iter_mut().enumerate() {
                if q.get(i, j) > tau_merge {
                    *count -= 1;
                }
            }
        }
        kept.push(c_max);
    }
    (kept, merged_into)
}

/// Keeps at most `k` single-class concepts per class, best score first
/// (lowest index on ties). Shared concepts are untouched; order is preserved.
pub fn prune_exclusive(
    bank: &ConceptBank,
    scores: &ClassScoreTable,
    k: usize,
) -> Result<ConceptBank> {
    let mut by_class: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    for (j, concept) in bank.concepts().iter().enumerate() {
        if concept.is_exclusive() {
            let y = concept.classes[0];
            let score = scores.get(j, y).ok_or_else(|| {
                Error::Invalid(format!("no class score for concept {j}, class {y}"))
            })?;
            by_class.entry(y).or_default().push((score, j));
        }
    }
    let mut drop = vec![false; bank.len()];
    for ranked in by_class.values_mut() {
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, j) in ranked.iter().skip(k) {
            drop[j] = true;
        }
    }
    let kept: Vec<usize> = (0..bank.len()).filter(|&j| !drop[j]).collect();
    Ok(bank.subset(&kept))
}

/// Binary concept labels for every image under the given strategy.
pub fn label_dataset(
    images: &EmbeddingMatrix,
    labels: &LabelVector,
    bank: &ConceptBank,
    affinity: &AffinityMatrix,
    tau_conf: f64,
    mode: StrategyMode,
) -> Result<LabeledDataset> {
    let (n, m) = (images.rows(), bank.len());
    if affinity.n() != n || affinity.m() != m || labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "affinity {}x{}, images {n}, labels {}, concepts {m}",
            affinity.n(),
            affinity.m(),
            labels.len()
        )));
    }
    if mode == StrategyMode::Independent {
        if let Some(concept) = bank
            .concepts()
            .iter()
            .position(|c| !c.is_exclusive() || !c.aliases.is_empty())
        {
            return Err(Error::IndependentRequiresUnmerged { concept });
        }
    }
    let mut s = vec![0u8; n * m];
    for i in 0..n {
        let y = labels.get(i);
        let row = affinity.row(i);
        for (j, concept) in bank.concepts().iter().enumerate() {
            let gate = match mode {
                StrategyMode::PartiallyShared => concept.has_class(y),
                StrategyMode::GloballyShared => true,
                StrategyMode::Independent => concept.classes[0] == y,
            };
            s[i * m + j] = u8::from(gate && row[j] > tau_conf);
        }
    }
    LabeledDataset::new(images.clone(), s, m, labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ConceptRecord;

    fn bank(classes: &[&[usize]], num_classes: usize) -> ConceptBank {
        let records: Vec<ConceptRecord> = classes
            .iter()
            .enumerate()
            .map(|(j, c)| ConceptRecord {
                text: format!("concept {j}"),
                classes: c.to_vec(),
                embedding_row: None,
                aliases: vec![],
            })
            .collect();
        ConceptBank::from_records(num_classes, &records).unwrap()
    }

    fn table(entries: &[((usize, usize), f64)]) -> ClassScoreTable {
        let mut t = ClassScoreTable::default();
        for &((j, y), v) in entries {
            t.insert(j, y, v);
        }
        t
    }

    #[test]
    fn filter_is_strict() {
        let b = bank(&[&[0, 1], &[1]], 2);
        let scores = table(&[((0, 0), 0.35), ((0, 1), 0.20), ((1, 1), 0.1)]);
        let out = filter_concepts(&b, &scores, 0.20).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.get(0).classes, vec![0]);

        let all_low = table(&[((0, 0), 0.1), ((0, 1), 0.2), ((1, 1), 0.0)]);
        assert!(filter_concepts(&b, &all_low, 0.20).unwrap().is_empty());
    }

    #[test]
    fn correlation_examples() {
        let a = AffinityMatrix::new(2, 3, vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let q = concept_correlation(&a).unwrap();
        assert!((q.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(q.get(0, 2), 1.0);
        assert_eq!(q.get(1, 1), 1.0);
        assert_eq!(q.get(1, 0), q.get(0, 1));

        let ortho = AffinityMatrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(concept_correlation(&ortho).unwrap().get(0, 1), 0.0);

        let zero = AffinityMatrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            concept_correlation(&zero),
            Err(Error::ZeroColumn { concept: 1 })
        ));
    }

    fn q_from(m: usize, pairs: &[((usize, usize), f64)], default: f64) -> CorrelationMatrix {
        let mut data = vec![default; m * m];
        for i in 0..m {
            data[i * m + i] = 1.0;
        }
        for &((i, j), v) in pairs {
            data[i * m + j] = v;
            data[j * m + i] = v;
        }
        CorrelationMatrix::new(m, data).unwrap()
    }

    #[test]
    fn merge_identity_threshold() {
        let b = bank(&[&[0], &[1], &[2]], 3);
        let q = q_from(3, &[], 0.99999);
        let (out, report) = merge_concepts(&b, &q, 1.0).unwrap();
        assert_eq!(out, b);
        assert_eq!(report.kept, vec![0, 1, 2]);
        assert!(report.merged_into.is_empty());
        assert!(report.q_stats.is_none());
    }

    #[test]
    fn merge_total_collapse() {
        let b = bank(&[&[0], &[1], &[2]], 3);
        let q = q_from(3, &[], 1.0);
        let (out, report) = merge_concepts(&b, &q, 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.get(0).text, "concept 0");
        assert_eq!(out.get(0).classes, vec![0, 1, 2]);
        assert_eq!(out.get(0).aliases, vec!["concept 1", "concept 2"]);
        assert_eq!(report.merged_into, BTreeMap::from([(1, 0), (2, 0)]));
    }

    #[test]
    fn merge_two_pairs() {
        let b = bank(&[&[0], &[1], &[2], &[3]], 4);
        let q = q_from(4, &[((0, 1), 0.9997), ((2, 3), 0.9998)], 0.5);
        let (out, report) = merge_concepts(&b, &q, 0.9996).unwrap();
        assert_eq!(report.kept, vec![0, 2]);
        assert_eq!(report.merged_into, BTreeMap::from([(1, 0), (3, 2)]));
        assert_eq!(out.get(0).classes, vec![0, 1]);
        assert_eq!(out.get(1).classes, vec![2, 3]);
        let stats = report.q_stats.unwrap();
        assert_eq!(stats.min, 0.9997);
        assert_eq!(stats.max, 0.9998);
    }

    #[test]
    fn merge_prefers_largest_group() {
        // 3 is similar to 1 and 2; 0 only to itself.
        let b = bank(&[&[0], &[1], &[1], &[2]], 3);
        let q = q_from(4, &[((1, 3), 0.9), ((2, 3), 0.9)], 0.0);
        let (_, report) = merge_concepts(&b, &q, 0.5).unwrap();
        assert_eq!(report.kept, vec![3, 0]);
    }

    #[test]
    fn prune_examples() {
        let b = bank(&[&[0], &[0, 1], &[0], &[0], &[1]], 2);
        let scores = table(&[
            ((0, 0), 0.4),
            ((1, 0), 0.9),
            ((1, 1), 0.9),
            ((2, 0), 0.5),
            ((3, 0), 0.3),
            ((4, 1), 0.3),
        ]);
        let k1 = prune_exclusive(&b, &scores, 1).unwrap();
        assert_eq!(k1.texts(), vec!["concept 1", "concept 2", "concept 4"]);
        let k0 = prune_exclusive(&b, &scores, 0).unwrap();
        assert_eq!(k0.texts(), vec!["concept 1"]);
        assert_eq!(prune_exclusive(&b, &scores, 9).unwrap(), b);
    }

    #[test]
    fn labeling_rules() {
        let images = EmbeddingMatrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let labels = LabelVector::new(vec![0, 1, 0], 2).unwrap();
        let b = bank(&[&[0]], 2);
        let a = AffinityMatrix::new(3, 1, vec![0.25, 0.99, 0.20]).unwrap();
        let ps = label_dataset(
            &images,
            &labels,
            &b,
            &a,
            0.20,
            StrategyMode::PartiallyShared,
        )
        .unwrap();
        assert_eq!(ps.concept_labels, vec![1, 0, 0]);
        let gs =
            label_dataset(&images, &labels, &b, &a, 0.20, StrategyMode::GloballyShared).unwrap();
        assert_eq!(gs.concept_labels, vec![1, 1, 0]);
        let ind = label_dataset(&images, &labels, &b, &a, 0.20, StrategyMode::Independent).unwrap();
        assert_eq!(ind.concept_labels, vec![1, 0, 0]);

        let shared = bank(&[&[0, 1]], 2);
        assert!(matches!(
            label_dataset(
                &images,
                &labels,
                &shared,
                &a,
                0.2,
                StrategyMode::Independent
            ),
            Err(Error::IndependentRequiresUnmerged { concept: 0 })
        ));
    }
}
