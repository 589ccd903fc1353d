use std::sync::Arc;

use super::{CsrMatrix, CsrPattern, Graph};

/// The three adjacency normalizations used across the laboratory.
///
/// * `bar_a[i][j] = w_ij / √((dᵢ+1)(dⱼ+1))`
/// * `tilde_a = bar_a + (D+I)^(-1/2) I (D+I)^(-1/2)`
/// * `row_norm_a[i][j] = w_ij / dᵢ`, with all-zero rows for isolated nodes
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub bar_a: CsrMatrix,
    pub tilde_a: CsrMatrix,
    pub row_norm_a: CsrMatrix,
}

/// `1/√(d+1)`, the symmetric normalizer shared by the constant and the
/// differentiable (masked) code paths so both agree bit for bit.
#[inline]
pub(crate) fn inv_sqrt_degree(d: f64) -> f64 {
    1.0 / (d + 1.0).sqrt()
}

pub fn build_normalized(graph: &Graph) -> NormalizedAdjacency {
    build_normalized_weighted(graph, &vec![1.0; graph.edges().len()])
}

/// Normalizations of the adjacency with one weight per undirected edge (in
/// `graph.edges()` order).
pub fn build_normalized_weighted(graph: &Graph, weights: &[f64]) -> NormalizedAdjacency {
    assert_eq!(weights.len(), graph.edges().len(), "one weight per edge");
    let n = graph.num_nodes();
    let index = graph.adjacency();
    let pattern = Arc::clone(index.pattern());
    let entry_w: Vec<f64> = index.entry_edge().iter().map(|&e| weights[e]).collect();

    let mut degree = vec![0.0; n];
    for (p, &r) in index.entry_row().iter().enumerate() {
        degree[r] += entry_w[p];
    }
    let s: Vec<f64> = degree.iter().map(|&d| inv_sqrt_degree(d)).collect();

    let bar_vals: Vec<f64> = entry_w
        .iter()
        .zip(index.entry_row().iter().zip(index.entry_col()))
        .map(|(&w, (&i, &j))| w * s[i] * s[j])
        .collect();
    let row_vals: Vec<f64> = entry_w
        .iter()
        .zip(index.entry_row())
        .map(|(&w, &i)| if degree[i] > 0.0 { w / degree[i] } else { 0.0 })
        .collect();

    let mut coords: Vec<(usize, usize)> = Vec::with_capacity(pattern.nnz() + n);
    for i in 0..n {
        coords.push((i, i));
        coords.extend(pattern.row(i).iter().map(|&j| (i, j)));
    }
    let tilde_pattern = Arc::new(CsrPattern::from_coords(n, n, &coords));
    let mut tilde_vals = vec![0.0; tilde_pattern.nnz()];
    for i in 0..n {
        for p in pattern.row_range(i) {
            let q = tilde_pattern.position(i, pattern.col_idx()[p]).expect("entry");
            tilde_vals[q] = bar_vals[p];
        }
        let q = tilde_pattern.position(i, i).expect("diagonal");
        tilde_vals[q] = s[i] * s[i];
    }

    NormalizedAdjacency {
        bar_a: CsrMatrix::new(Arc::clone(&pattern), bar_vals).expect("sizes"),
        tilde_a: CsrMatrix::new(tilde_pattern, tilde_vals).expect("sizes"),
        row_norm_a: CsrMatrix::new(pattern, row_vals).expect("sizes"),
    }
}
