//! Softmax, classification and metric-learning losses with their gradients.

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-8;

/// Row-wise softmax. Rows sum to one and are invariant to per-row shifts.
pub fn softmax(logits: &Matrix) -> Result<Matrix> {
    if !logits.is_finite() {
        return Err(Error::Numeric("softmax logits"));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Gradient through a row-wise softmax given its output `p`.
pub fn softmax_backward(p: &Matrix, dout: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let dr = dout.row(r);
        let inner = dot(pr, dr);
        for ((o, &pv), &dv) in dx.row_mut(r).iter_mut().zip(pr).zip(dr) {
            *o = pv * (dv - inner);
        }
    }
    dx
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy and its gradient `(softmax − onehot) / b` w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::dim("cross_entropy", logits.shape(), (labels.len(), 1)));
    }
    let k = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    let mut grad = softmax(logits)?;
    let b = logits.rows() as f64;
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        loss += log_sum_exp(row) - row[y];
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v /= b);
    }
    Ok((loss / b, grad))
}

/// Cosine similarity of two vectors; both norms must exceed `1e-8`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", (1, a.len()), (1, b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::DegenerateVector {
            context: "cosine_similarity".into(),
        });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `∂ cos(a, b) / ∂a` for fixed `b`.
pub fn cosine_grad_wrt_first(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    let c = dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - c * ai / (na * na))
        .collect()
}

/// Unit-normalizes each row, returning the normalized rows and their norms.
pub fn l2_normalize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = norm(x.row(r));
        if n <= NORM_EPS {
            return Err(Error::DegenerateVector {
                context: format!("row {r} of normalized batch"),
            });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Gradient through row normalization: `dx = (dŷ − ŷ(ŷ·dŷ)) / ‖x‖`.
pub fn l2_normalize_backward(normalized: &Matrix, norms: &[f64], dout: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(normalized.rows(), normalized.cols());
    for r in 0..normalized.rows() {
        let y = normalized.row(r);
        let d = dout.row(r);
        let inner = dot(y, d);
        for ((o, &yv), &dv) in dx.row_mut(r).iter_mut().zip(y).zip(d) {
            *o = (dv - yv * inner) / norms[r];
        }
    }
    dx
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss on unit-normalized rows.
///
/// Each anchor with at least one positive contributes
/// `max(0, max_pos d − min_neg d + margin)`; the loss is the mean over those anchors.
pub fn batch_hard_triplet(features: &Matrix, identities: &[u32], margin: f64) -> Result<(f64, Matrix)> {
    let b = features.rows();
    if identities.len() != b {
        return Err(Error::dim("batch_hard_triplet", features.shape(), (identities.len(), 1)));
    }
    let distinct = {
        let mut ids = identities.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    if distinct < 2 {
        return Err(Error::Protocol("triplet batch needs at least two identities".into()));
    }
    let (unit, norms) = l2_normalize_rows(features)?;

    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            dist[i * b + j] = euclidean(unit.row(i), unit.row(j));
        }
    }

    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut active = Vec::new();
    for a in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist[a * b + j];
            if identities[j] == identities[a] {
                if pos.is_none_or(|p| d > dist[a * b + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| d < dist[a * b + n]) {
                neg = Some(j);
            }
        }
        let (Some(p), Some(n)) = (pos, neg) else {
            continue;
        };
        anchors += 1;
        let value = dist[a * b + p] - dist[a * b + n] + margin;
        if value > 0.0 {
            total += value;
            active.push((a, p, n));
        }
    }
    if anchors == 0 {
        return Err(Error::Protocol("triplet batch has no identity with two samples".into()));
    }
    let loss = total / anchors as f64;

    let mut dunit = Matrix::zeros(b, features.cols());
    let w = 1.0 / anchors as f64;
    let push = |i: usize, j: usize, sign: f64, dunit: &mut Matrix| {
        let d = dist[i * b + j];
        if d <= 1e-12 {
            return;
        }
        for c in 0..features.cols() {
            let g = sign * w * (unit.get(i, c) - unit.get(j, c)) / d;
            dunit.set(i, c, dunit.get(i, c) + g);
            dunit.set(j, c, dunit.get(j, c) - g);
        }
    };
    for &(a, p, n) in &active {
        push(a, p, 1.0, &mut dunit);
        push(a, n, -1.0, &mut dunit);
    }
    Ok((loss, l2_normalize_backward(&unit, &norms, &dunit)))
}

/// Symmetric supervised contrastive loss between two batches of embeddings with
/// identity-level positives. Returns the loss and gradients w.r.t. both inputs.
pub fn symmetric_contrastive(
    left: &Matrix,
    right: &Matrix,
    identities: &[u32],
    temperature: f64,
) -> Result<(f64, Matrix, Matrix)> {
    left.same_shape(right, "symmetric_contrastive")?;
    let b = left.rows();
    if identities.len() != b {
        return Err(Error::dim("symmetric_contrastive", left.shape(), (identities.len(), 1)));
    }
    let (l_unit, l_norms) = l2_normalize_rows(left)?;
    let (r_unit, r_norms) = l2_normalize_rows(right)?;
    let mut logits = l_unit.matmul_t(&r_unit)?;
    logits.scale(1.0 / temperature);

    let positives: Vec<Vec<usize>> = (0..b)
        .map(|i| (0..b).filter(|&j| identities[j] == identities[i]).collect())
        .collect();
    let bf = b as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(b, b);

    // left → right: rows
    let row_probs = softmax(&logits)?;
    for i in 0..b {
        let lse = log_sum_exp(logits.row(i));
        let pos = &positives[i];
        let inv = 1.0 / pos.len() as f64;
        loss += 0.5 / bf * pos.iter().map(|&j| inv * (lse - logits.get(i, j))).sum::<f64>();
        for k in 0..b {
            let target = if identities[k] == identities[i] { inv } else { 0.0 };
            dlogits.set(i, k, dlogits.get(i, k) + 0.5 / bf * (row_probs.get(i, k) - target));
        }
    }

    // right → left: columns
    let cols = logits.transpose();
    let col_probs = softmax(&cols)?;
    for j in 0..b {
        let lse = log_sum_exp(cols.row(j));
        let pos = &positives[j];
        let inv = 1.0 / pos.len() as f64;
        loss += 0.5 / bf * pos.iter().map(|&i| inv * (lse - cols.get(j, i))).sum::<f64>();
        for k in 0..b {
            let target = if identities[k] == identities[j] { inv } else { 0.0 };
            dlogits.set(k, j, dlogits.get(k, j) + 0.5 / bf * (col_probs.get(j, k) - target));
        }
    }

    dlogits.scale(1.0 / temperature);
    let dl_unit = dlogits.matmul(&r_unit)?;
    let dr_unit = dlogits.t_matmul(&l_unit)?;
    Ok((
        loss,
        l2_normalize_backward(&l_unit, &l_norms, &dl_unit),
        l2_normalize_backward(&r_unit, &r_norms, &dr_unit),
    ))
}
