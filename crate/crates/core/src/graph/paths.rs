use std::collections::VecDeque;

use super::Graph;

/// Hop distances `d(i, j) ≤ t` for `i ≠ j`, stored per source node with
/// targets in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct HopDistanceTable {
    max_hops: usize,
    rows: Vec<Vec<(usize, u32)>>,
}

impl HopDistanceTable {
    pub fn max_hops(&self) -> usize {
        self.max_hops
    }

    pub fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u32> {
        let row = &self.rows[i];
        row.binary_search_by_key(&j, |&(k, _)| k).ok().map(|p| row[p].1)
    }

    /// All `(j, d(i, j))` within range of `i`.
    pub fn row(&self, i: usize) -> &[(usize, u32)] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// t-bounded breadth-first search from every node.
pub fn bounded_shortest_paths(graph: &Graph, t: usize) -> HopDistanceTable {
    bounded_shortest_paths_from_lists(&graph.neighbor_lists(), t)
}

/// Same as [`bounded_shortest_paths`] over explicit neighbor lists, used
/// when the reachable structure is a thresholded masked adjacency.
pub fn bounded_shortest_paths_from_lists(neighbors: &[Vec<usize>], t: usize) -> HopDistanceTable {
    bounded_shortest_paths_among(neighbors, t, &vec![true; neighbors.len()])
}

/// Distances between kept nodes only: rows of dropped nodes are empty and
/// dropped targets are not stored. Paths may still pass through dropped
/// nodes.
pub fn bounded_shortest_paths_among(neighbors: &[Vec<usize>], t: usize, keep: &[bool]) -> HopDistanceTable {
    assert!(t >= 1, "max hops must be at least 1");
    assert_eq!(keep.len(), neighbors.len(), "one keep flag per node");
    let n = neighbors.len();
    let mut dist = vec![u32::MAX; n];
    let mut touched = Vec::new();
    let mut queue = VecDeque::new();
    let mut rows = Vec::with_capacity(n);
    for src in 0..n {
        if !keep[src] {
            rows.push(Vec::new());
            continue;
        }
        dist[src] = 0;
        touched.push(src);
        queue.push_back(src);
        let mut row = Vec::new();
        while let Some(u) = queue.pop_front() {
            let du = dist[u];
            if du as usize >= t {
                continue;
            }
            for &v in &neighbors[u] {
                if dist[v] == u32::MAX {
                    dist[v] = du + 1;
                    touched.push(v);
                    queue.push_back(v);
                    if keep[v] {
                        row.push((v, du + 1));
                    }
                }
            }
        }
        row.sort_unstable();
        rows.push(row);
        for &v in &touched {
            dist[v] = u32::MAX;
        }
        touched.clear();
    }
    HopDistanceTable { max_hops: t, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Split;
    use crate::tensor::Tensor;

    fn graph(n: usize, edges: Vec<(usize, usize)>) -> Graph {
        Graph::new(n, 1, edges, Tensor::zeros(&[n, 1]), vec![0; n], vec![0; n], vec![Split::Train; n])
            .unwrap()
    }

    #[test]
    fn path_graph() {
        let h = bounded_shortest_paths(&graph(3, vec![(0, 1), (1, 2)]), 2);
        assert_eq!(h.get(0, 2), Some(2));
        assert_eq!(h.get(0, 1), Some(1));
        assert_eq!(h.get(0, 0), None);
        let h1 = bounded_shortest_paths(&graph(3, vec![(0, 1), (1, 2)]), 1);
        assert_eq!(h1.get(0, 2), None);
    }

    #[test]
    fn disconnected_pair_absent() {
        let h = bounded_shortest_paths(&graph(2, vec![]), 10);
        assert!(h.is_empty());
    }

    #[test]
    fn restricted_table_matches_full_on_kept_nodes() {
        let g = graph(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)]);
        let keep = [true, false, true, false, true, true];
        let full = bounded_shortest_paths(&g, 3);
        let part = bounded_shortest_paths_among(&g.neighbor_lists(), 3, &keep);
        for i in 0..6 {
            for j in 0..6 {
                let want = if keep[i] && keep[j] { full.get(i, j) } else { None };
                assert_eq!(part.get(i, j), want, "({i}, {j})");
            }
        }
    }

    #[test]
    fn symmetric() {
        let g = graph(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (1, 5)]);
        let h = bounded_shortest_paths(&g, 3);
        for i in 0..6 {
            for &(j, d) in h.row(i) {
                assert_eq!(h.get(j, i), Some(d));
            }
        }
    }
}
