//! Models: the scalar linear GNN of the theory checks, message-passing
//! classifiers, and the soft edge-mask extractor.

pub mod checkpoint;
mod mask;
mod mpnn;
mod theory;

use std::sync::Arc;

pub use mask::{edge_mask_apply, edge_mask_values, edge_scores_to_mask, EdgeMaskParams, MaskMode, MASK_FLOOR};
pub use mpnn::{masked_gcn_values, mpnn_forward, mpnn_predict, Aggregation, Head, MpnnArch, MpnnOutput, MpnnParams, LEAKY_SLOPE};
pub use theory::{theory_gnn_forward, theory_gnn_tape, LayerScalars, TheoryGnnParams, TheoryOutput, TheoryVars};

use crate::graph::{build_normalized, CsrMatrix, EdgeIndex, Graph};

/// Graph-derived constants shared by every forward pass on one graph.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub num_nodes: usize,
    pub index: EdgeIndex,
    pub tilde_a: Arc<CsrMatrix>,
    pub row_norm_a: Arc<CsrMatrix>,
    /// Endpoints of each undirected edge, in `graph.edges()` order.
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
}

impl GraphContext {
    pub fn new(graph: &Graph) -> Self {
        let adj = build_normalized(graph);
        Self {
            num_nodes: graph.num_nodes(),
            index: graph.adjacency(),
            tilde_a: Arc::new(adj.tilde_a),
            row_norm_a: Arc::new(adj.row_norm_a),
            edge_src: graph.edges().iter().map(|e| e.0).collect(),
            edge_dst: graph.edges().iter().map(|e| e.1).collect(),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }
}

#[cfg(test)]
mod tests;
