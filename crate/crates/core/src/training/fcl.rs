//! Sparse final layer: softmax cross-entropy with the elastic-net penalty
//! `lambda * ((1 - alpha) ||W||_2^2 + alpha ||W||_1)`, solved by proximal SAGA.
//!
//! SAGA keeps, for every sample, the residual `softmax(W x_i + b) - e_{y_i}`
//! observed at its last visit. A step on minibatch `B` uses the
//! variance-reduced direction
//!
//! ```text
//! v = mean_{i in B} (r_i' - r_i) x_i^T + mean_{all i} r_i x_i^T
//! ```
//!
//! followed by the closed-form proximal map of the penalty,
//! `w <- soft(w - eta v, eta lambda alpha) / (1 + 2 eta lambda (1 - alpha))`.
//! The bias is not penalized.
//!
//! Adding one vector to every class row of `W` leaves the softmax unchanged,
//! so along that direction only the penalty has curvature and plain proximal
//! steps crawl. After every epoch each feature column is therefore shifted
//! to its exact penalty minimizer, which never increases the objective.

use crate::data::{EmbeddingMatrix, FclConfig, LabelVector};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::training::{LinearHead, SparseClassifier};

const SHUFFLE_STREAM: u64 = 0xFC1;

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Prox of `eta * lambda * ((1 - alpha) w^2 + alpha |w|)` at `w`.
#[inline]
pub fn elastic_net_prox(w: f64, eta: f64, lambda: f64, alpha: f64) -> f64 {
    soft_threshold(w, eta * lambda * alpha) / (1.0 + 2.0 * eta * lambda * (1.0 - alpha))
}

/// Minimizer over `s` of `sum_c (1 - alpha) (w_c + s)^2 + alpha |w_c + s|`,
/// the penalty along a direction that leaves every softmax output unchanged.
/// Returns the `s` of smallest magnitude among minimizers.
pub fn best_shift(w: &[f64], alpha: f64) -> f64 {
    let a = 1.0 - alpha;
    let l = w.len() as f64;
    let sum: f64 = w.iter().sum();
    // Right and left derivatives at s, with kinks at s = -w_c.
    let slopes = |s: f64| {
        let (mut pos, mut neg, mut zero) = (0.0, 0.0, 0.0);
        for &v in w {
            let t = v + s;
            if t > 0.0 {
                pos += 1.0;
            } else if t < 0.0 {
                neg += 1.0;
            } else {
                zero += 1.0;
            }
        }
        let smooth = 2.0 * a * (sum + l * s);
        (
            smooth + alpha * (pos - neg - zero),
            smooth + alpha * (pos - neg + zero),
        )
    };
    let (left0, right0) = slopes(0.0);
    if left0 <= 0.0 && right0 >= 0.0 {
        return 0.0;
    }
    let mut kinks: Vec<f64> = w.iter().map(|v| -v).collect();
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();
    for &k in &kinks {
        let (left, right) = slopes(k);
        if left <= 0.0 && right >= 0.0 {
            return k;
        }
    }
    // Stationary point inside an open interval between kinks.
    let mut bounds = vec![f64::NEG_INFINITY];
    bounds.extend(&kinks);
    bounds.push(f64::INFINITY);
    for pair in bounds.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if a == 0.0 {
            continue;
        }
        let mid = if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else if lo.is_finite() {
            lo + 1.0
        } else if hi.is_finite() {
            hi - 1.0
        } else {
            0.0
        };
        let signs: f64 = w.iter().map(|v| (v + mid).signum()).sum();
        let s = -(sum + alpha * signs / (2.0 * a)) / l;
        if s > lo && s < hi {
            return s;
        }
    }
    0.0
}

/// Shifts every feature column of `w` (`l x p`) by its penalty-minimizing
/// constant. Cross-entropy is unchanged; the penalty never increases.
fn recenter_columns(w: &mut [f64], l: usize, p: usize, alpha: f64) {
    let mut col = vec![0.0; l];
    for t in 0..p {
        for c in 0..l {
            col[c] = w[c * p + t];
        }
        let s = best_shift(&col, alpha);
        if s == 0.0 {
            continue;
        }
        let before = penalty(&col, 1.0, alpha);
        let shifted: Vec<f64> = col.iter().map(|v| v + s).collect();
        if penalty(&shifted, 1.0, alpha) < before {
            for c in 0..l {
                w[c * p + t] = shifted[c];
            }
        }
    }
}

/// Writes `softmax(logits) - e_label` into `out`; returns the CE loss.
fn residual_into(clf: &SparseClassifier, x: &[f64], label: usize, out: &mut [f64]) -> f64 {
    for (c, o) in out.iter_mut().enumerate() {
        *o = clf.class_logit(x, c);
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = out[label] - max;
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    let loss = total.ln() - shifted_label;
    for o in out.iter_mut() {
        *o /= total;
    }
    out[label] -= 1.0;
    loss
}

fn check_shapes(clf: &SparseClassifier, x: &EmbeddingMatrix, labels: &LabelVector) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows, {} labels",
            x.rows(),
            labels.len()
        )));
    }
    if x.cols() != clf.num_features() || labels.num_classes() != clf.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "classifier is {}x{}, data has {} features and {} classes",
            clf.num_classes(),
            clf.num_features(),
            x.cols(),
            labels.num_classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy and its full-batch gradient `(dW, db)`.
pub fn smooth_gradient(
    clf: &SparseClassifier,
    x: &EmbeddingMatrix,
    labels: &LabelVector,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (l, p) = (clf.num_classes(), clf.num_features());
    let n = x.rows() as f64;
    let mut gw = vec![0.0; l * p];
    let mut gb = vec![0.0; l];
    let mut r = vec![0.0; l];
    let mut loss = 0.0;
    for (i, row) in x.iter_rows().enumerate() {
        loss += residual_into(clf, row, labels.get(i), &mut r);
        for c in 0..l {
            gb[c] += r[c];
            for (g, v) in gw[c * p..(c + 1) * p].iter_mut().zip(row) {
                *g += r[c] * v;
            }
        }
    }
    gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g /= n);
    (loss / n, gw, gb)
}

pub fn penalty(w: &[f64], lambda: f64, alpha: f64) -> f64 {
    let l2: f64 = w.iter().map(|v| v * v).sum();
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    lambda * ((1.0 - alpha) * l2 + alpha * l1)
}

/// Mean cross-entropy plus the elastic-net penalty.
pub fn fcl_objective(
    clf: &SparseClassifier,
    x: &EmbeddingMatrix,
    labels: &LabelVector,
    lambda: f64,
    alpha: f64,
) -> f64 {
    let (loss, _, _) = smooth_gradient(clf, x, labels);
    loss + penalty(&clf.head.w, lambda, alpha)
}

/// Largest violation of the first-order optimality conditions:
/// `|g + 2 lambda (1 - alpha) w + lambda alpha sign(w)|` for `w != 0`,
/// `max(0, |g| - lambda alpha)` for `w = 0`, and `|g_b|` for biases.
pub fn kkt_residual_from_grad(w: &[f64], gw: &[f64], gb: &[f64], lambda: f64, alpha: f64) -> f64 {
    let l1 = lambda * alpha;
    let l2 = 2.0 * lambda * (1.0 - alpha);
    let weights = w.iter().zip(gw).map(|(&w, &g)| {
        if w != 0.0 {
            (g + l2 * w + l1 * w.signum()).abs()
        } else {
            (g.abs() - l1).max(0.0)
        }
    });
    weights
        .chain(gb.iter().map(|g| g.abs()))
        .fold(0.0, f64::max)
}

pub fn kkt_residual(
    clf: &SparseClassifier,
    x: &EmbeddingMatrix,
    labels: &LabelVector,
    lambda: f64,
    alpha: f64,
) -> f64 {
    let (_, gw, gb) = smooth_gradient(clf, x, labels);
    kkt_residual_from_grad(&clf.head.w, &gw, &gb, lambda, alpha)
}

/// `1 / (3 L)` with `L = (max_i ||x_i||^2 + 1) / 2`, a smoothness bound for
/// each sample's cross-entropy in `(W, b)`.
pub fn default_step_size(x: &EmbeddingMatrix) -> f64 {
    let max_sq = x
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    1.0 / (3.0 * 0.5 * (max_sq + 1.0))
}

#[derive(Debug, Clone)]
pub struct FclOutcome {
    pub classifier: SparseClassifier,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub step_size: f64,
    /// `(iteration, full-batch objective)` at start and after every epoch.
    pub log: Vec<(usize, f64)>,
}

/// Proximal SAGA from a zero classifier. Runs until the optimality residual
/// (checked on the full batch after every epoch) is below `cfg.tolerance`
/// or `cfg.max_iterations` minibatch updates have been made.
pub fn train_fcl(
    x: &EmbeddingMatrix,
    labels: &LabelVector,
    cfg: &FclConfig,
    seed: u64,
) -> Result<FclOutcome> {
    let (lambda, alpha) = (cfg.lambda, cfg.alpha);
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::out_of_range("fcl.lambda", lambda, ">= 0"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::out_of_range("fcl.alpha", alpha, "[0, 1]"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::out_of_range("fcl.batch_size", 0, ">= 1"));
    }
    let (n, p, l) = (x.rows(), x.cols(), labels.num_classes());
    let mut clf = SparseClassifier::zeros(l, p);
    check_shapes(&clf, x, labels)?;
    let eta = cfg.step_size.unwrap_or_else(|| default_step_size(x));
    let batch = cfg.batch_size.min(n);
    let epoch_len = n.div_ceil(batch);

    // Residual table and its running averages.
    let mut table = vec![0.0; n * l];
    for (i, row) in x.iter_rows().enumerate() {
        residual_into(&clf, row, labels.get(i), &mut table[i * l..(i + 1) * l]);
    }
    let mut avg_w = vec![0.0; l * p];
    let mut avg_b = vec![0.0; l];
    let refresh = |table: &[f64], avg_w: &mut [f64], avg_b: &mut [f64]| {
        avg_w.iter_mut().for_each(|v| *v = 0.0);
        avg_b.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in x.iter_rows().enumerate() {
            let r = &table[i * l..(i + 1) * l];
            for c in 0..l {
                avg_b[c] += r[c];
                for (a, v) in avg_w[c * p..(c + 1) * p].iter_mut().zip(row) {
                    *a += r[c] * v;
                }
            }
        }
        avg_w
            .iter_mut()
            .chain(avg_b.iter_mut())
            .for_each(|v| *v /= n as f64);
    };
    refresh(&table, &mut avg_w, &mut avg_b);

    let check = |clf: &SparseClassifier, iteration: usize| -> Result<(f64, f64)> {
        let (loss, gw, gb) = smooth_gradient(clf, x, labels);
        let objective = loss + penalty(&clf.head.w, lambda, alpha);
        if !objective.is_finite() {
            return Err(Error::NonFiniteLoss { step: iteration });
        }
        Ok((
            objective,
            kkt_residual_from_grad(&clf.head.w, &gw, &gb, lambda, alpha),
        ))
    };

    let (objective, mut residual) = check(&clf, 0)?;
    let mut log = vec![(0, objective)];
    let mut rng = SplitMix64::stream(seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut delta_w = vec![0.0; l * p];
    let mut delta_b = vec![0.0; l];
    let mut fresh = vec![0.0; l];
    let mut iterations = 0;
    let mut converged = residual < cfg.tolerance;

    while !converged && iterations < cfg.max_iterations {
        if cursor >= n {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let end = (cursor + batch).min(n);
        let members = &order[cursor..end];
        cursor = end;
        iterations += 1;

        delta_w.iter_mut().for_each(|v| *v = 0.0);
        delta_b.iter_mut().for_each(|v| *v = 0.0);
        for &i in members {
            let row = x.row(i);
            residual_into(&clf, row, labels.get(i), &mut fresh);
            let stored = &mut table[i * l..(i + 1) * l];
            for c in 0..l {
                let diff = fresh[c] - stored[c];
                stored[c] = fresh[c];
                if diff == 0.0 {
                    continue;
                }
                delta_b[c] += diff;
                for (d, v) in delta_w[c * p..(c + 1) * p].iter_mut().zip(row) {
                    *d += diff * v;
                }
            }
        }
        let inv_b = 1.0 / members.len() as f64;
        let inv_n = 1.0 / n as f64;
        let w = &mut clf.head.w;
        for k in 0..l * p {
            let direction = delta_w[k] * inv_b + avg_w[k];
            w[k] = elastic_net_prox(w[k] - eta * direction, eta, lambda, alpha);
            avg_w[k] += delta_w[k] * inv_n;
        }
        for c in 0..l {
            clf.head.b[c] -= eta * (delta_b[c] * inv_b + avg_b[c]);
            avg_b[c] += delta_b[c] * inv_n;
        }

        if iterations % epoch_len == 0 || iterations == cfg.max_iterations {
            if lambda > 0.0 {
                recenter_columns(&mut clf.head.w, l, p, alpha);
            }
            refresh(&table, &mut avg_w, &mut avg_b);
            let (objective, r) = check(&clf, iterations)?;
            residual = r;
            log.push((iterations, objective));
            converged = residual < cfg.tolerance;
        }
    }

    Ok(FclOutcome {
        classifier: SparseClassifier {
            head: LinearHead::new(l, p, clf.head.w, clf.head.b)?,
        },
        iterations,
        residual,
        converged,
        step_size: eta,
        log,
    })
}
