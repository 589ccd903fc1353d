use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use super::{Ablations, EnvPartition, ObjectiveConfig};
use crate::error::ObjectiveError;
use crate::graph::{HopDistanceTable, NeighborhoodProfile};

/// Floor on `r_same` in the pair-weight denominator.
pub const LRA_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairMode {
    /// Same class, different environments.
    CrossEnv,
    /// Same class, within the hop radius; environments unused.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
    /// Hop distance, recorded for local pairs.
    pub hops: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub mode: PairMode,
    /// Indexed by class.
    pub classes: Vec<Vec<Pair>>,
}

impl PairSet {
    pub fn empty(mode: PairMode, num_classes: usize) -> Self {
        Self { mode, classes: vec![Vec::new(); num_classes] }
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Pair)> {
        self.classes.iter().enumerate().flat_map(|(c, ps)| ps.iter().map(move |p| (c, p)))
    }
}

fn subsample<T: Copy>(items: Vec<T>, budget: usize, rng: &mut impl Rng) -> Vec<T> {
    if items.len() <= budget {
        return items;
    }
    let mut picked = index::sample(rng, items.len(), budget).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|k| items[k]).collect()
}

/// Same-class pairs across every unordered pair of environments, at most
/// `budget` per class per environment pair, all with weight 1.
pub fn build_cia_pairs(
    labels: &[usize],
    num_classes: usize,
    partition: &EnvPartition,
    budget: usize,
    rng: &mut impl Rng,
) -> Result<PairSet, ObjectiveError> {
    let mut set = PairSet::empty(PairMode::CrossEnv, num_classes);
    if partition.num_envs() < 2 {
        log::warn!("cross-environment pairs need two environments, found {}", partition.num_envs());
        return Ok(set);
    }
    // env -> class -> nodes
    let by_class: Vec<(i64, Vec<Vec<usize>>)> = partition
        .groups
        .iter()
        .map(|(&e, nodes)| {
            let mut per = vec![Vec::new(); num_classes];
            for &i in nodes {
                per[labels[i]].push(i);
            }
            (e, per)
        })
        .collect();
    for c in 0..num_classes {
        let present = by_class.iter().filter(|(_, per)| !per[c].is_empty()).count();
        if present == 1 {
            log::info!("class {c} appears in a single training environment; no cross-env pairs");
        }
        for a in 0..by_class.len() {
            for b in a + 1..by_class.len() {
                let (left, right) = (&by_class[a].1[c], &by_class[b].1[c]);
                let total = left.len() * right.len();
                if total == 0 {
                    continue;
                }
                let picked: Vec<usize> = if total <= budget {
                    (0..total).collect()
                } else {
                    let mut p = index::sample(rng, total, budget).into_vec();
                    p.sort_unstable();
                    p
                };
                for k in picked {
                    let (i, j) = (left[k / right.len()], right[k % right.len()]);
                    set.classes[c].push(Pair { i, j, weight: 1.0, hops: None });
                }
            }
        }
    }
    Ok(set)
}

/// Unnormalized CIA-LRA pair weight `r_diff / (d · max(r_same, ε))`, with
/// disabled factors replaced by 1. With `r_same_in_numerator` the weight
/// becomes `r_diff · r_same / d` and the `r_same` denominator is dropped.
pub fn lra_raw_weight(r_same: f64, r_diff: f64, d: u32, ablations: &Ablations) -> f64 {
    let mut num = if ablations.use_r_diff { r_diff } else { 1.0 };
    if ablations.r_same_in_numerator {
        num *= r_same;
    }
    let mut den = if ablations.use_inv_d { d as f64 } else { 1.0 };
    if ablations.use_inv_r_same && !ablations.r_same_in_numerator {
        den *= r_same.max(LRA_EPSILON);
    }
    num / den
}

/// Min-max normalization of one class's weights. A single weight, or a
/// set of equal weights, maps to all ones.
pub fn normalize_weights(raw: &mut [f64]) {
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    let span = hi - lo;
    for w in raw.iter_mut() {
        *w = if span > 0.0 { (*w - lo) / span } else { 1.0 };
    }
}

/// Same-class pairs among `nodes` within the hop radius of `hops`, at most
/// `config.pair_budget` per class, weighted by the normalized local
/// neighborhood discrepancy. Environment ids are never consulted.
pub fn build_cia_lra_pairs(
    labels: &[usize],
    num_classes: usize,
    nodes: &[usize],
    profile: &NeighborhoodProfile,
    hops: &HopDistanceTable,
    config: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> PairSet {
    let mut member = vec![false; labels.len()];
    for &i in nodes {
        member[i] = true;
    }
    let mut candidates: BTreeMap<usize, Vec<(usize, usize, u32)>> = BTreeMap::new();
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &i in &sorted {
        for &(j, d) in hops.row(i) {
            if j > i && member[j] && labels[j] == labels[i] && d as usize <= config.hops {
                candidates.entry(labels[i]).or_default().push((i, j, d));
            }
        }
    }
    let mut set = PairSet::empty(PairMode::Local, num_classes);
    for c in 0..num_classes {
        let cands = candidates.remove(&c).unwrap_or_default();
        if cands.is_empty() {
            log::debug!("class {c} has no same-class pair within {} hops", config.hops);
            continue;
        }
        let picked = subsample(cands, config.pair_budget, rng);
        let mut raw: Vec<f64> = picked
            .iter()
            .map(|&(i, j, d)| {
                let (r_same, r_diff) = crate::graph::ratio_discrepancies(profile.row(i), profile.row(j), c);
                lra_raw_weight(r_same, r_diff, d, &config.ablations)
            })
            .collect();
        normalize_weights(&mut raw);
        set.classes[c] = picked
            .iter()
            .zip(raw)
            .map(|(&(i, j, d), weight)| Pair { i, j, weight, hops: Some(d) })
            .collect();
    }
    set
}
