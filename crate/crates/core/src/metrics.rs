//! Accuracy, Concept-Efficient Accuracy and class-level alignment.
//!
//! CEA divides accuracy by `(log_k m)^beta`, where `m` is the number of
//! concepts and `k = ceil(log2 l)` is the number of binary concepts needed
//! to tell `l` classes apart. Two guards keep the ratio defined and bounded:
//! `k` is floored at 2 (so `l = 2` still has a valid log base), and the
//! denominator is floored at 1 (so `m < k` never rewards accuracy above ACC).

use serde::{Deserialize, Serialize};

use crate::affinity::AffinityMatrix;
use crate::data::{ConceptBank, LabelVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub k: usize,
    pub beta: f64,
    pub cea: f64,
    pub alignment_score: Option<f64>,
}

impl EvalReport {
    pub fn new(acc: f64, num_concepts: usize, num_classes: usize, beta: f64) -> Result<Self> {
        Ok(Self {
            acc,
            num_concepts,
            num_classes,
            k: cea_base(num_classes)?,
            beta,
            cea: cea(acc, num_concepts, num_classes, beta)?,
            alignment_score: None,
        })
    }

    /// `ACC,#Concepts,CEA` header plus one row, percentages with one decimal.
    pub fn table_csv(rows: &[(String, &EvalReport)]) -> String {
        let mut out = String::from("name,acc,num_concepts,cea\n");
        for (name, r) in rows {
            out.push_str(&format!(
                "{name},{:.1},{},{:.1}\n",
                r.acc * 100.0,
                r.num_concepts,
                r.cea * 100.0
            ));
        }
        out
    }
}

pub fn accuracy(pred: &LabelVector, truth: &LabelVector) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("accuracy of an empty label set".into()));
    }
    let hits = pred
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `max(2, ceil(log2 l))`, computed in integers.
pub fn cea_base(num_classes: usize) -> Result<usize> {
    if num_classes < 2 {
        return Err(Error::out_of_range("num_classes", num_classes, ">= 2"));
    }
    let ceil_log2 = (usize::BITS - (num_classes - 1).leading_zeros()) as usize;
    Ok(ceil_log2.max(2))
}

pub fn cea(acc: f64, num_concepts: usize, num_classes: usize, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&acc) {
        return Err(Error::out_of_range("acc", acc, "[0, 1]"));
    }
    if num_concepts == 0 {
        return Err(Error::out_of_range("num_concepts", 0, ">= 1"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::out_of_range("beta", beta, "finite and >= 0"));
    }
    let k = cea_base(num_classes)?;
    let log_k_m = (num_concepts as f64).ln() / (k as f64).ln();
    let denominator = log_k_m.powf(beta).max(1.0);
    Ok(acc / denominator)
}

/// Mean affinity between each class's images and the concepts assigned to
/// that class, averaged over classes that have at least one image and one
/// concept. `affinity` must be aligned with `bank`.
pub fn alignment_score(
    affinity: &AffinityMatrix,
    bank: &ConceptBank,
    labels: &LabelVector,
) -> Result<f64> {
    if affinity.m() != bank.len() || affinity.n() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "affinity {}x{} vs {} labels and {} concepts",
            affinity.n(),
            affinity.m(),
            labels.len(),
            bank.len()
        )));
    }
    let members = labels.class_members();
    let mut class_means = Vec::new();
    for (y, rows) in members.iter().enumerate() {
        let concepts: Vec<usize> = (0..bank.len())
            .filter(|&j| bank.get(j).has_class(y))
            .collect();
        if concepts.is_empty() || rows.is_empty() {
            continue;
        }
        let mut total = 0.0;
        for &i in rows {
            for &j in &concepts {
                total += affinity.get(i, j);
            }
        }
        class_means.push(total / (rows.len() * concepts.len()) as f64);
    }
    if class_means.is_empty() {
        return Err(Error::NoAlignedClass);
    }
    Ok(class_means.iter().sum::<f64>() / class_means.len() as f64)
}
