//! Few-shot exemplar selection per class.
//!
//! Each class draws from its own generator, `SplitMix64::stream(seed, class)`,
//! and sees its members in ascending row order, so a class's picks do not
//! depend on other classes' rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::affinity::dot;
use crate::data::{EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Farthest-point sampling in cosine distance.
    Fps,
    /// Uniform sampling without replacement, for noisy datasets.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub shots: usize,
    /// Class index -> selected image rows, in selection order.
    pub classes: BTreeMap<usize, Vec<usize>>,
}

impl ExemplarSet {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.classes).expect("exemplars serialize");
        s.push('\n');
        s
    }
}

fn checked_members(labels: &LabelVector, shots: usize) -> Result<Vec<Vec<usize>>> {
    if shots == 0 {
        return Err(Error::out_of_range("shots", 0, ">= 1"));
    }
    let members = labels.class_members();
    if let Some(class) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass { class });
    }
    Ok(members)
}

/// Farthest-point picks for one class: a random start, then repeatedly the
/// member with the largest minimum cosine distance to the picks so far
/// (lowest row on ties).
pub fn fps_class(
    images: &EmbeddingMatrix,
    members: &[usize],
    shots: usize,
    rng: &mut SplitMix64,
) -> Vec<usize> {
    let take = shots.min(members.len());
    let mut picked = Vec::with_capacity(take);
    if take == 0 {
        return picked;
    }
    let mut chosen = vec![false; members.len()];
    let first = rng.below(members.len());
    chosen[first] = true;
    picked.push(members[first]);
    let mut min_dist: Vec<f64> = members
        .iter()
        .map(|&i| 1.0 - dot(images.row(i), images.row(members[first])))
        .collect();
    while picked.len() < take {
        let mut best: Option<usize> = None;
        for (slot, &d) in min_dist.iter().enumerate() {
            if chosen[slot] {
                continue;
            }
            match best {
                Some(b) if min_dist[b] >= d => {}
                _ => best = Some(slot),
            }
        }
        let slot = best.expect("unpicked member remains");
        chosen[slot] = true;
        let row = members[slot];
        picked.push(row);
        for (k, &i) in members.iter().enumerate() {
            let d = 1.0 - dot(images.row(i), images.row(row));
            if d < min_dist[k] {
                min_dist[k] = d;
            }
        }
    }
    picked
}

pub fn select_exemplars_fps(
    images: &EmbeddingMatrix,
    labels: &LabelVector,
    shots: usize,
    seed: u64,
) -> Result<ExemplarSet> {
    if images.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} images, {} labels",
            images.rows(),
            labels.len()
        )));
    }
    if !images.is_normalized() {
        return Err(Error::NotNormalized("image embeddings"));
    }
    let members = checked_members(labels, shots)?;
    let classes = members
        .iter()
        .enumerate()
        .map(|(y, rows)| {
            let mut rng = SplitMix64::stream(seed, y as u64);
            (y, fps_class(images, rows, shots, &mut rng))
        })
        .collect();
    Ok(ExemplarSet { shots, classes })
}

pub fn select_exemplars_random(
    images: &EmbeddingMatrix,
    labels: &LabelVector,
    shots: usize,
    seed: u64,
) -> Result<ExemplarSet> {
    if images.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} images, {} labels",
            images.rows(),
            labels.len()
        )));
    }
    let members = checked_members(labels, shots)?;
    let classes = members
        .iter()
        .enumerate()
        .map(|(y, rows)| {
            let mut rng = SplitMix64::stream(seed, y as u64);
            (y, rng.sample(rows, shots))
        })
        .collect();
    Ok(ExemplarSet { shots, classes })
}

pub fn select_exemplars(
    mode: SelectionMode,
    images: &EmbeddingMatrix,
    labels: &LabelVector,
    shots: usize,
    seed: u64,
) -> Result<ExemplarSet> {
    match mode {
        SelectionMode::Fps => select_exemplars_fps(images, labels, shots, seed),
        SelectionMode::Random => select_exemplars_random(images, labels, shots, seed),
    }
}
