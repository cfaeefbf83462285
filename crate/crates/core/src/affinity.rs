//! Image–concept cosine affinities and per-(concept, class) alignment scores.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{ConceptBank, EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};

/// Rows per parallel work unit. Each entry is one sequential dot product, so
/// the output does not depend on how tiles are scheduled.
const ROW_TILE: usize = 64;

/// Number of best-aligned class images averaged by [`class_scores`].
pub const TOP_IMAGES: usize = 4;

/// `n x m` cosine similarities, row-major (row = image, column = concept).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(n: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * m {
            return Err(Error::DimensionMismatch(format!(
                "{n}x{m} affinity needs {} values, got {}",
                n * m,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("affinity values must be finite".into()));
        }
        Ok(Self { n, m, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    /// Matrix restricted to the listed columns, in that order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&j) = columns.iter().find(|&&j| j >= self.m) {
            return Err(Error::DimensionMismatch(format!(
                "column {j} out of range for {} columns",
                self.m
            )));
        }
        let mut data = Vec::with_capacity(self.n * columns.len());
        for i in 0..self.n {
            let row = self.row(i);
            data.extend(columns.iter().map(|&j| row[j]));
        }
        Ok(Self {
            n: self.n,
            m: columns.len(),
            data,
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&i) = rows.iter().find(|&&i| i >= self.n) {
            return Err(Error::DimensionMismatch(format!(
                "row {i} out of range for {} rows",
                self.n
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * self.m);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            n: rows.len(),
            m: self.m,
            data,
        })
    }

    /// Columns aligned with `bank`: column `j` is concept `j`'s embedding row.
    pub fn for_bank(&self, bank: &ConceptBank) -> Result<Self> {
        self.select_columns(&bank.embedding_rows())
    }

    /// CSV with a header of concept texts and one line per image.
    pub fn to_csv(&self, headers: &[String]) -> String {
        let mut out = String::new();
        let quoted: Vec<String> = headers
            .iter()
            .map(|h| format!("\"{}\"", h.replace('"', "\"\"")))
            .collect();
        out.push_str(&quoted.join(","));
        out.push('\n');
        for i in 0..self.n {
            let line: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// `A[i][j] = <images_i, texts_j>` for row-normalized inputs.
pub fn compute_affinity(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
) -> Result<AffinityMatrix> {
    if images.cols() != texts.cols() {
        return Err(Error::DimensionMismatch(format!(
            "image dimension {} != text dimension {}",
            images.cols(),
            texts.cols()
        )));
    }
    if !images.is_normalized() {
        return Err(Error::NotNormalized("image embeddings"));
    }
    if !texts.is_normalized() {
        return Err(Error::NotNormalized("text embeddings"));
    }
    let (n, m) = (images.rows(), texts.rows());
    let mut data = vec![0.0; n * m];
    data.par_chunks_mut(ROW_TILE * m)
        .enumerate()
        .for_each(|(tile, out)| {
            let first = tile * ROW_TILE;
            for (local, out_row) in out.chunks_exact_mut(m).enumerate() {
                let img = images.row(first + local);
                for (j, slot) in out_row.iter_mut().enumerate() {
                    *slot = dot(img, texts.row(j));
                }
            }
        });
    AffinityMatrix::new(n, m, data)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Filtering statistic for every `(concept j, class y in C_j)` pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassScoreTable {
    entries: BTreeMap<(usize, usize), f64>,
}

impl ClassScoreTable {
    pub fn get(&self, concept: usize, class: usize) -> Option<f64> {
        self.entries.get(&(concept, class)).copied()
    }

    pub fn insert(&mut self, concept: usize, class: usize, score: f64) {
        self.entries.insert((concept, class), score);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }
}

/// Mean of the largest `min(TOP_IMAGES, len)` values.
pub fn top_mean(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| b.total_cmp(a));
    let k = values.len().min(TOP_IMAGES);
    values[..k].iter().sum::<f64>() / k as f64
}

/// Scores each concept against each of its classes by the mean of its top
/// four affinities over that class's images. `affinity` must be aligned with
/// `bank` (see [`AffinityMatrix::for_bank`]).
pub fn class_scores(
    affinity: &AffinityMatrix,
    bank: &ConceptBank,
    labels: &LabelVector,
) -> Result<ClassScoreTable> {
    if affinity.m() != bank.len() {
        return Err(Error::DimensionMismatch(format!(
            "affinity has {} columns, bank has {} concepts",
            affinity.m(),
            bank.len()
        )));
    }
    if affinity.n() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "affinity has {} rows, {} labels",
            affinity.n(),
            labels.len()
        )));
    }
    let members = labels.class_members();
    let mut table = ClassScoreTable::default();
    let mut buf = Vec::new();
    for (j, concept) in bank.concepts().iter().enumerate() {
        for &y in &concept.classes {
            let rows = members.get(y).ok_or(Error::ClassOutOfRange {
                class: y,
                num_classes: labels.num_classes(),
            })?;
            if rows.is_empty() {
                return Err(Error::EmptyClass { class: y });
            }
            buf.clear();
            buf.extend(rows.iter().map(|&i| affinity.get(i, j)));
            table.insert(j, y, top_mean(&mut buf));
        }
    }
    Ok(table)
}
