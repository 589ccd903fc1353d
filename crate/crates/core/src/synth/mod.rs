//! Seeded generators for the synthetic distributions: the regression SCM
//! under concept or covariate shift, CSBM-OOD, and the 4-class toy set.

mod csbm;
mod scm;
mod toy;

pub use csbm::{gen_csbm, orthonormal_basis, CsbmConfig, CsbmSample};
pub use scm::{gen_scm, scm_env_targets, ScmConfig};
pub(crate) use scm::{local_graph, propagate};
pub use toy::{gen_toy, toy_invariant_mean, toy_spurious_mean, ToyConfig, TOY_TEST_ENV};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::Split;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Concept,
    Covariate,
}

impl ShiftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::Concept => "concept",
            ShiftKind::Covariate => "covariate",
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concept" => Ok(ShiftKind::Concept),
            "covariate" => Ok(ShiftKind::Covariate),
            other => Err(format!("unknown shift kind {other:?} (expected concept|covariate)")),
        }
    }
}

pub fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Erdős–Rényi edges inside each environment block (nodes numbered block by
/// block), plus random cross-block edges so that they make up
/// `cross_fraction` of all edges. Returns the global edge list and, per
/// block, its local edge list.
pub(crate) fn multi_env_topology(
    sizes: &[usize],
    p: f64,
    cross_fraction: f64,
    rng: &mut StreamRng,
) -> (Vec<(usize, usize)>, Vec<Vec<(usize, usize)>>) {
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut total = 0;
    for &s in sizes {
        offsets.push(total);
        total += s;
    }
    let mut local = Vec::with_capacity(sizes.len());
    let mut edges = Vec::new();
    for (&n, &off) in sizes.iter().zip(&offsets) {
        let mut block = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random::<f64>() < p {
                    block.push((u, v));
                    edges.push((u + off, v + off));
                }
            }
        }
        local.push(block);
    }
    if sizes.len() > 1 && cross_fraction > 0.0 {
        let target = (cross_fraction / (1.0 - cross_fraction) * edges.len() as f64).round() as usize;
        let block_of: Vec<usize> =
            sizes.iter().enumerate().flat_map(|(b, &n)| std::iter::repeat_n(b, n)).collect();
        let mut seen: std::collections::BTreeSet<(usize, usize)> = Default::default();
        let max_pairs: usize = {
            let same: usize = sizes.iter().map(|n| n * n.saturating_sub(1) / 2).sum();
            total * total.saturating_sub(1) / 2 - same
        };
        while seen.len() < target.min(max_pairs) {
            let u = rng.random_range(0..total);
            let v = rng.random_range(0..total);
            if block_of[u] != block_of[v] {
                seen.insert((u.min(v), u.max(v)));
            }
        }
        edges.extend(seen);
    }
    (edges, local)
}

/// Marks a random `val_fraction` of the training-environment nodes as
/// validation; nodes of test environments get `Split::Test`.
pub(crate) fn assign_splits(
    envs: &[i64],
    is_test_env: impl Fn(i64) -> bool,
    val_fraction: f64,
    rng: &mut StreamRng,
) -> Vec<Split> {
    envs.iter()
        .map(|&e| {
            if is_test_env(e) {
                Split::Test
            } else if rng.random::<f64>() < val_fraction {
                Split::Val
            } else {
                Split::Train
            }
        })
        .collect()
}
