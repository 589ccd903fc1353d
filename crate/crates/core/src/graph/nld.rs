use super::{Graph, NormalizedAdjacency};
use crate::error::GraphError;
use crate::tensor::Tensor;

/// Per-node class ratios `R[i][c]` of the `L`-step row-normalized walk.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodProfile {
    pub ratios: Tensor,
    pub depth: usize,
}

impl NeighborhoodProfile {
    pub fn row(&self, i: usize) -> &[f64] {
        self.ratios.row(i)
    }

    pub fn num_classes(&self) -> usize {
        self.ratios.cols()
    }
}

/// `R = (row_norm_a)^L · OneHot(labels)`, by `L` repeated products.
///
/// Nodes with `known[i] == false` start from a zero row, so they carry no
/// label mass into their neighbors' ratios.
pub fn neighborhood_label_distribution(
    graph: &Graph,
    adj: &NormalizedAdjacency,
    depth: usize,
    known: Option<&[bool]>,
) -> NeighborhoodProfile {
    let n = graph.num_nodes();
    let c = graph.num_classes();
    let mut onehot = Tensor::zeros(&[n, c]);
    for (i, &y) in graph.labels().iter().enumerate() {
        if known.is_none_or(|k| k[i]) {
            onehot.set(i, y, 1.0);
        }
    }
    let mut ratios = onehot;
    for _ in 0..depth {
        ratios = adj.row_norm_a.matmul_dense(&ratios).expect("square adjacency");
    }
    NeighborhoodProfile { ratios, depth }
}

/// `(r_same, r_diff)` for a same-class pair:
/// `r_same = |r_i^c − r_j^c|`, `r_diff = Σ_{c'≠c} |r_i^{c'} − r_j^{c'}|`.
pub fn pair_ratio_discrepancies(
    profile: &NeighborhoodProfile,
    labels: &[usize],
    i: usize,
    j: usize,
    class: usize,
) -> Result<(f64, f64), GraphError> {
    if labels[i] != class || labels[j] != class {
        return Err(GraphError::ClassMismatch { i, j, class });
    }
    Ok(ratio_discrepancies(profile.row(i), profile.row(j), class))
}

pub(crate) fn ratio_discrepancies(ri: &[f64], rj: &[f64], class: usize) -> (f64, f64) {
    let mut r_diff = 0.0;
    for (c, (a, b)) in ri.iter().zip(rj).enumerate() {
        if c != class {
            r_diff += (a - b).abs();
        }
    }
    ((ri[class] - rj[class]).abs(), r_diff)
}
