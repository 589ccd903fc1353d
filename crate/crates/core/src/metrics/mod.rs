//! Evaluation metrics and the subgroup generalization bound terms.
//!
//! Representations follow the toy convention: the first `D/2` columns are
//! the invariant part and the last `D/2` the spurious part.

mod bound;

pub use bound::{
    bound_terms, bound_terms_from_parts, heterophilic_ratios, mean_aggregate, nearest_train, AnalysisParams,
    BoundParts, BoundReport, NodeSet,
};

use crate::error::MetricError;
use crate::tensor::Tensor;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of `mask` nodes whose argmax logit equals the label.
pub fn ood_accuracy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64, MetricError> {
    if mask.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    let hits = mask.iter().filter(|&&i| argmax(logits.row(i)) == labels[i]).count();
    Ok(hits as f64 / mask.len() as f64)
}

fn half_width(reps: &Tensor) -> Result<usize, MetricError> {
    if reps.cols() % 2 != 0 {
        return Err(MetricError::Shape(format!("representation width {} is odd", reps.cols())));
    }
    Ok(reps.cols() / 2)
}

/// Mean over classes of `E‖x − μ_c‖²` on the invariant half (population
/// convention). Classes with fewer than two nodes are skipped; 0 when no
/// class qualifies.
pub fn invariant_variance(reps: &Tensor, labels: &[usize]) -> Result<f64, MetricError> {
    let h = half_width(reps)?;
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let mut total = 0.0;
    let mut counted = 0;
    for rows in members.iter().filter(|r| r.len() >= 2) {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; h];
        for &i in rows {
            for (m, v) in mean.iter_mut().zip(&reps.row(i)[..h]) {
                *m += v / n;
            }
        }
        let spread: f64 = rows
            .iter()
            .map(|&i| reps.row(i)[..h].iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
            .sum();
        total += spread / n;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// Mean L2 norm of the spurious half.
pub fn spurious_norm(reps: &Tensor) -> Result<f64, MetricError> {
    let h = half_width(reps)?;
    if reps.rows() == 0 {
        return Err(MetricError::EmptySet("representation"));
    }
    let total: f64 = (0..reps.rows()).map(|i| reps.row(i)[h..].iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
    Ok(total / reps.rows() as f64)
}

/// Fraction of `rows` with `h[y] ≤ γ + max_{c≠y} h[c]`.
pub fn margin_loss(logits: &Tensor, labels: &[usize], rows: &[usize], gamma: f64) -> Result<f64, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    assert!(gamma >= 0.0, "margin must be non-negative");
    let bad = rows
        .iter()
        .filter(|&&i| {
            let row = logits.row(i);
            let y = labels[i];
            let other = row.iter().enumerate().filter(|&(c, _)| c != y).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            row[y] <= gamma + other
        })
        .count();
    Ok(bad as f64 / rows.len() as f64)
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `max_j min_i ‖g_i − g_j‖` over test rows `j` and train rows `i`.
pub fn epsilon_distance(train: &Tensor, test: &Tensor) -> Result<f64, MetricError> {
    if train.rows() == 0 {
        return Err(MetricError::EmptySet("train"));
    }
    if test.rows() == 0 {
        return Err(MetricError::EmptySet("test"));
    }
    if train.cols() != test.cols() {
        return Err(MetricError::Shape(format!("widths {} and {}", train.cols(), test.cols())));
    }
    Ok((0..test.rows())
        .map(|j| (0..train.rows()).map(|i| l2(train.row(i), test.row(j))).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests;
