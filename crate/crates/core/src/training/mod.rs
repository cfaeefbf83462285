//! Concept bottleneck layer, logit normalization and the sparse final layer.

pub mod cbl;
pub mod fcl;
pub mod model;

use crate::affinity::dot;
use crate::data::{EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};

pub use cbl::{bce_loss_and_grad, cbl_loss, train_cbl, CblOutcome};
pub use fcl::{fcl_objective, kkt_residual, smooth_gradient, train_fcl, FclOutcome};
pub use model::TrainedModel;

/// Lower bound applied to every per-concept standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// `y = W x + b` with `W` stored `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub outputs: usize,
    pub inputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            outputs,
            inputs,
            w: vec![0.0; outputs * inputs],
            b: vec![0.0; outputs],
        }
    }

    pub fn new(outputs: usize, inputs: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if w.len() != outputs * inputs || b.len() != outputs {
            return Err(Error::DimensionMismatch(format!(
                "{outputs}x{inputs} head with {} weights and {} biases",
                w.len(),
                b.len()
            )));
        }
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("head parameters must be finite".into()));
        }
        Ok(Self {
            outputs,
            inputs,
            w,
            b,
        })
    }

    pub fn weight_row(&self, k: usize) -> &[f64] {
        &self.w[k * self.inputs..(k + 1) * self.inputs]
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.b[k] + dot(self.weight_row(k), x);
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs];
        self.apply_into(x, &mut out);
        out
    }

    /// Outputs for every row, as an `n x outputs` matrix.
    pub fn apply_rows(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if x.cols() != self.inputs {
            return Err(Error::DimensionMismatch(format!(
                "head expects {} inputs, got {}",
                self.inputs,
                x.cols()
            )));
        }
        let mut data = vec![0.0; x.rows() * self.outputs];
        for (row, out) in x.iter_rows().zip(data.chunks_exact_mut(self.outputs)) {
            self.apply_into(row, out);
        }
        EmbeddingMatrix::new(x.rows(), self.outputs, data)
    }
}

/// Per-concept training-set mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NormStats {
    pub fn normalize_into(&self, logits: &mut [f64]) {
        for ((v, mu), sigma) in logits.iter_mut().zip(&self.mu).zip(&self.sigma) {
            *v = (*v - mu) / sigma;
        }
    }

    pub fn normalize_rows(&self, logits: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if logits.cols() != self.mu.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} norm stats for {} logits",
                self.mu.len(),
                logits.cols()
            )));
        }
        let mut data = logits.data().to_vec();
        for row in data.chunks_exact_mut(logits.cols()) {
            self.normalize_into(row);
        }
        EmbeddingMatrix::new(logits.rows(), logits.cols(), data)
    }
}

/// Column mean and population standard deviation of a logit matrix.
pub fn column_stats(logits: &EmbeddingMatrix) -> NormStats {
    let (n, m) = (logits.rows(), logits.cols());
    let mut mu = vec![0.0; m];
    let mut sigma = vec![0.0; m];
    for j in 0..m {
        let col = || logits.iter_rows().map(move |r| r[j]);
        let rough = col().sum::<f64>() / n as f64;
        let mean = rough + col().map(|v| v - rough).sum::<f64>() / n as f64;
        let var = col().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        mu[j] = mean;
        sigma[j] = var.sqrt().max(SIGMA_FLOOR);
    }
    NormStats { mu, sigma }
}

pub fn fit_norm_stats(head: &LinearHead, images: &EmbeddingMatrix) -> Result<NormStats> {
    Ok(column_stats(&head.apply_rows(images)?))
}

/// Final layer `f(h) = W_F h + b_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseClassifier {
    pub head: LinearHead,
}

impl SparseClassifier {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            head: LinearHead::zeros(classes, features),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.outputs
    }

    pub fn num_features(&self) -> usize {
        self.head.inputs
    }

    pub fn nnz(&self) -> usize {
        self.head.w.iter().filter(|w| **w != 0.0).count()
    }

    /// Class-`c` logit, summed as `b[c]` then each `h[j] * W[c][j]` in index order.
    pub fn class_logit(&self, h: &[f64], c: usize) -> f64 {
        let mut acc = self.head.b[c];
        for (x, w) in h.iter().zip(self.head.weight_row(c)) {
            acc += x * w;
        }
        acc
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        (0..self.num_classes())
            .map(|c| self.class_logit(h, c))
            .collect()
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

pub fn predict(
    head: &LinearHead,
    stats: &NormStats,
    clf: &SparseClassifier,
    images: &EmbeddingMatrix,
) -> Result<LabelVector> {
    if head.outputs != clf.num_features() || stats.mu.len() != head.outputs {
        return Err(Error::DimensionMismatch(
            "bottleneck, norm stats and classifier disagree on concept count".into(),
        ));
    }
    let logits = head.apply_rows(images)?;
    let normalized = stats.normalize_rows(&logits)?;
    let preds = normalized
        .iter_rows()
        .map(|h| argmax(&clf.logits(h)))
        .collect();
    LabelVector::new(preds, clf.num_classes().max(2))
}
