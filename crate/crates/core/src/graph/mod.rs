//! Graph representation, adjacency normalizations, bounded shortest paths
//! and neighborhood label statistics.

mod io;
mod nld;
mod normalize;
mod paths;
mod sparse;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::tensor::Tensor;

pub use io::{read_dataset, write_dataset, Dataset, DatasetMeta};
pub use nld::{neighborhood_label_distribution, pair_ratio_discrepancies, NeighborhoodProfile};
pub(crate) use nld::ratio_discrepancies;
pub use normalize::{build_normalized, build_normalized_weighted, NormalizedAdjacency};
pub use paths::{bounded_shortest_paths, bounded_shortest_paths_among, bounded_shortest_paths_from_lists, HopDistanceTable};
pub use sparse::{CsrMatrix, CsrPattern};

/// Which split a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split token {other:?}")),
        }
    }
}

/// Environment id; `-1` means unknown.
pub type EnvId = i64;

/// Undirected, node-labeled, environment-labeled graph with dense features.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted. The struct is
/// immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor,
    labels: Vec<usize>,
    envs: Vec<EnvId>,
    split: Vec<Split>,
}

impl Graph {
    /// Validates and builds a graph. Edge endpoints may be given in either
    /// order; they are canonicalized to `u < v` and sorted.
    pub fn new(
        num_nodes: usize,
        num_classes: usize,
        edges: Vec<(usize, usize)>,
        features: Tensor,
        labels: Vec<usize>,
        envs: Vec<EnvId>,
        split: Vec<Split>,
    ) -> Result<Self, GraphError> {
        if features.rows() != num_nodes || (num_nodes > 0 && features.rank() != 2) {
            return Err(GraphError::Length {
                what: "features",
                got: features.rows(),
                expected: num_nodes,
            });
        }
        for (what, got) in [("labels", labels.len()), ("envs", envs.len()), ("split", split.len())] {
            if got != num_nodes {
                return Err(GraphError::Length { what, got, expected: num_nodes });
            }
        }
        for (node, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(GraphError::LabelOutOfRange { node, label, num_classes });
            }
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            for node in [u, v] {
                if node >= num_nodes {
                    return Err(GraphError::EndpointOutOfRange { node, num_nodes });
                }
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        if let Some(w) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(GraphError::DuplicateEdge(w[0].0, w[0].1));
        }
        Ok(Self { num_nodes, num_classes, edges: canon, features, labels, envs, split })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        if self.num_nodes == 0 {
            0
        } else {
            self.features.cols()
        }
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn envs(&self) -> &[EnvId] {
        &self.envs
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn nodes_in_split(&self, split: Split) -> Vec<usize> {
        (0..self.num_nodes).filter(|&i| self.split[i] == split).collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Sorted neighbor lists.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Directed adjacency structure with both directions of every edge.
    pub fn adjacency(&self) -> EdgeIndex {
        EdgeIndex::new(self)
    }

    /// Graph induced by `nodes` (in the given order), plus the map from new
    /// to old node index.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<(Graph, Vec<usize>), GraphError> {
        let mut position = vec![usize::MAX; self.num_nodes];
        for (new, &old) in nodes.iter().enumerate() {
            position[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(u, v)| position[u] != usize::MAX && position[v] != usize::MAX)
            .map(|&(u, v)| (position[u], position[v]))
            .collect();
        let d = self.feature_dim();
        let mut feats = Vec::with_capacity(nodes.len() * d);
        for &i in nodes {
            feats.extend_from_slice(self.features.row(i));
        }
        let features = Tensor::matrix(nodes.len(), d, feats)
            .map_err(|_| GraphError::Length { what: "features", got: nodes.len(), expected: d })?;
        let graph = Graph::new(
            nodes.len(),
            self.num_classes,
            edges,
            features,
            nodes.iter().map(|&i| self.labels[i]).collect(),
            nodes.iter().map(|&i| self.envs[i]).collect(),
            nodes.iter().map(|&i| self.split[i]).collect(),
        )?;
        Ok((graph, nodes.to_vec()))
    }

    /// Same graph with nodes renumbered: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph, GraphError> {
        Ok(self.induced_subgraph(perm)?.0)
    }

    /// Copy of the graph with different node features.
    pub fn with_features(&self, features: Tensor) -> Result<Graph, GraphError> {
        Graph::new(
            self.num_nodes,
            self.num_classes,
            self.edges.clone(),
            features,
            self.labels.clone(),
            self.envs.clone(),
            self.split.clone(),
        )
    }

    /// Copy of the graph with a different split assignment.
    pub fn with_split(&self, split: Vec<Split>) -> Result<Graph, GraphError> {
        Graph::new(
            self.num_nodes,
            self.num_classes,
            self.edges.clone(),
            self.features.clone(),
            self.labels.clone(),
            self.envs.clone(),
            split,
        )
    }
}

/// Directed view of an undirected graph: a CSR pattern holding both
/// directions of every edge, with the undirected edge id of each entry.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pattern: Arc<CsrPattern>,
    entry_edge: Vec<usize>,
    entry_row: Vec<usize>,
}

impl EdgeIndex {
    fn new(graph: &Graph) -> Self {
        let n = graph.num_nodes();
        let mut coords = Vec::with_capacity(2 * graph.edges().len());
        for &(u, v) in graph.edges() {
            coords.push((u, v));
            coords.push((v, u));
        }
        let pattern = Arc::new(CsrPattern::from_coords(n, n, &coords));
        let mut entry_edge = vec![0; pattern.nnz()];
        for (e, &(u, v)) in graph.edges().iter().enumerate() {
            entry_edge[pattern.position(u, v).expect("edge present")] = e;
            entry_edge[pattern.position(v, u).expect("edge present")] = e;
        }
        let entry_row = pattern.entry_rows();
        Self { pattern, entry_edge, entry_row }
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    /// Undirected edge id of each stored entry.
    pub fn entry_edge(&self) -> &[usize] {
        &self.entry_edge
    }

    /// Source row of each stored entry.
    pub fn entry_row(&self) -> &[usize] {
        &self.entry_row
    }

    /// Target column of each stored entry.
    pub fn entry_col(&self) -> &[usize] {
        self.pattern.col_idx()
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }
}
