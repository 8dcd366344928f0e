//! Identity cross-entropy, batch-hard triplet, and pairwise matching losses.
//! Each returns the loss together with its gradient w.r.t. its input.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;

/// Probabilities are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before logs.
pub const CLAMP_EPS: f64 = 1e-7;
pub const DEFAULT_MARGIN: f64 = 0.3;

/// Person ids of a batch and the derived same-person matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    pub person_ids: Vec<usize>,
    pub same: Array2<f64>,
}

impl BatchLabels {
    pub fn new(person_ids: &[usize]) -> Self {
        let b = person_ids.len();
        let same = Array2::from_shape_fn((b, b), |(i, j)| (person_ids[i] == person_ids[j]) as u8 as f64);
        Self {
            person_ids: person_ids.to_vec(),
            same,
        }
    }

    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_rgb: f64,
    pub cls_par: f64,
    pub tri_rgb: f64,
    pub tri_par: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub total: f64,
}

/// Unweighted sum of the five terms.
pub fn total_loss(cls_rgb: f64, cls_par: f64, tri_rgb: f64, tri_par: f64, matching: f64) -> LossBreakdown {
    LossBreakdown {
        cls_rgb,
        cls_par,
        tri_rgb,
        tri_par,
        matching,
        total: cls_rgb + cls_par + tri_rgb + tri_par + matching,
    }
}

fn check_ids(ids: &[usize], classes: usize, rows: usize) -> Result<()> {
    if ids.len() != rows {
        return Err(Error::Validation(format!("{} ids for {rows} rows", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= classes) {
        return Err(Error::Validation(format!("id {bad} outside {classes} classes")));
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, ids: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, k) = logits.dim();
    check_ids(ids, k, b)?;
    let mut grad = Array2::zeros((b, k));
    let mut loss = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        loss += log_z - row[ids[i]];
        for j in 0..k {
            grad[[i, j]] = (row[j] - log_z).exp() / b as f64;
        }
        grad[[i, ids[i]]] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Cross-entropy of a linear classifier applied to embeddings.
pub fn classification_loss(embeddings: &Array2<f64>, ids: &[usize], classifier: &Linear) -> Result<f64> {
    if embeddings.ncols() != classifier.inputs() {
        return Err(Error::Validation(format!(
            "embedding width {} differs from classifier input {}",
            embeddings.ncols(),
            classifier.inputs()
        )));
    }
    Ok(cross_entropy(&classifier.forward(embeddings), ids)?.0)
}

#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
    /// False when no anchor had both a positive and a negative.
    pub valid: bool,
}

fn distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    d2.max(1e-12).sqrt()
}

/// Batch-hard triplet loss with Euclidean distance, averaged over anchors
/// that have at least one positive and one negative.
pub fn triplet_loss(embeddings: &Array2<f64>, ids: &[usize], margin: f64) -> Result<TripletOutput> {
    let (b, d) = embeddings.dim();
    if ids.len() != b {
        return Err(Error::Validation(format!("{} ids for {b} embeddings", ids.len())));
    }
    let mut grad = Array2::zeros((b, d));
    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut terms = Vec::new();
    for a in 0..b {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let dist = distance(embeddings.row(a), embeddings.row(j));
            if ids[j] == ids[a] {
                if hardest_pos.map_or(true, |(_, v)| dist > v) {
                    hardest_pos = Some((j, dist));
                }
            } else if hardest_neg.map_or(true, |(_, v)| dist < v) {
                hardest_neg = Some((j, dist));
            }
        }
        if let (Some((p, dp)), Some((n, dn))) = (hardest_pos, hardest_neg) {
            anchors += 1;
            let hinge = margin + dp - dn;
            if hinge > 0.0 {
                total += hinge;
                terms.push((a, p, dp, n, dn));
            }
        }
    }
    if anchors == 0 {
        return Ok(TripletOutput {
            loss: 0.0,
            grad,
            valid: false,
        });
    }
    let scale = 1.0 / anchors as f64;
    for (a, p, dp, n, dn) in terms {
        let up = (&embeddings.row(a) - &embeddings.row(p)) / dp;
        let un = (&embeddings.row(a) - &embeddings.row(n)) / dn;
        let ga = (&up - &un) * scale;
        grad.row_mut(a).scaled_add(1.0, &ga);
        grad.row_mut(p).scaled_add(-scale, &up);
        grad.row_mut(n).scaled_add(scale, &un);
    }
    Ok(TripletOutput {
        loss: total * scale,
        grad,
        valid: true,
    })
}

fn check_square(p: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if p.nrows() != p.ncols() || p.dim() != y.dim() {
        return Err(Error::Validation(format!(
            "score matrix {:?} and labels {:?} must be equal squares",
            p.dim(),
            y.dim()
        )));
    }
    Ok(())
}

fn counted(i: usize, j: usize, include_self: bool) -> bool {
    include_self || i != j
}

/// Binary cross-entropy averaged over ordered pairs (`B^2` of them, or
/// `B^2 - B` without self pairs).
pub fn matching_loss(p: &Array2<f64>, y: &Array2<f64>, include_self: bool) -> Result<f64> {
    check_square(p, y)?;
    let b = p.nrows();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((i, j), &pij) in p.indexed_iter() {
        if !counted(i, j, include_self) {
            continue;
        }
        let pc = pij.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        let yij = y[[i, j]];
        sum -= yij * pc.ln() + (1.0 - yij) * (1.0 - pc).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Validation(format!("no pairs in a batch of {b}")));
    }
    Ok(sum / count as f64)
}

/// Gradient of `matching_loss` w.r.t. `p` (zero where clamping is active).
pub fn matching_loss_grad(p: &Array2<f64>, y: &Array2<f64>, include_self: bool) -> Result<Array2<f64>> {
    check_square(p, y)?;
    let b = p.nrows();
    let count = if include_self { b * b } else { b * b - b } as f64;
    Ok(Array2::from_shape_fn((b, b), |(i, j)| {
        let pij = p[[i, j]];
        if !counted(i, j, include_self) || !(CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&pij) {
            return 0.0;
        }
        (pij - y[[i, j]]) / (count * pij * (1.0 - pij))
    }))
}
