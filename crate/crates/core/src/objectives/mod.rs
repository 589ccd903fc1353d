//! Training objectives: ERM, IRMv1, VREx, CIA and CIA-LRA.

mod pairs;
mod penalties;

pub use pairs::{
    build_cia_lra_pairs, build_cia_pairs, lra_raw_weight, normalize_weights, Pair, PairMode, PairSet, LRA_EPSILON,
};
pub use penalties::{alignment_loss, erm_loss, irmv1_penalty, per_env_losses, total_loss, vrex_penalty, LossTerms};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{EnvId, Graph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Erm,
    Irmv1,
    Vrex,
    Cia,
    CiaLra,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] =
        [ObjectiveKind::Erm, ObjectiveKind::Irmv1, ObjectiveKind::Vrex, ObjectiveKind::Cia, ObjectiveKind::CiaLra];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Erm => "erm",
            ObjectiveKind::Irmv1 => "irm",
            ObjectiveKind::Vrex => "vrex",
            ObjectiveKind::Cia => "cia",
            ObjectiveKind::CiaLra => "cia_lra",
        }
    }

    /// Whether the objective reads environment labels.
    pub fn uses_envs(self) -> bool {
        matches!(self, ObjectiveKind::Irmv1 | ObjectiveKind::Vrex | ObjectiveKind::Cia)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "erm" => Ok(ObjectiveKind::Erm),
            "irm" | "irmv1" => Ok(ObjectiveKind::Irmv1),
            "vrex" => Ok(ObjectiveKind::Vrex),
            "cia" => Ok(ObjectiveKind::Cia),
            "cia_lra" | "cia-lra" => Ok(ObjectiveKind::CiaLra),
            other => Err(format!("unknown objective {other:?} (expected erm|irm|vrex|cia|cia_lra)")),
        }
    }
}

/// Switches for the individual factors of the CIA-LRA pair weight and
/// for the edge mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablations {
    pub use_r_diff: bool,
    pub use_inv_r_same: bool,
    pub use_inv_d: bool,
    pub use_mask: bool,
    pub r_same_in_numerator: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self { use_r_diff: true, use_inv_r_same: true, use_inv_d: true, use_mask: true, r_same_in_numerator: false }
    }
}

impl Ablations {
    /// Short tag naming the disabled factors, `full` when none is.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if !self.use_r_diff {
            parts.push("no_rdiff");
        }
        if !self.use_inv_r_same {
            parts.push("no_inv_rsame");
        }
        if !self.use_inv_d {
            parts.push("no_inv_d");
        }
        if !self.use_mask {
            parts.push("no_mask");
        }
        if self.r_same_in_numerator {
            parts.push("rsame_numerator");
        }
        if parts.is_empty() { "full".into() } else { parts.join("+") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Penalty weight (λ for alignment, β for IRMv1/VREx).
    pub lambda: f64,
    pub hops: usize,
    pub pair_budget: usize,
    pub ablations: Ablations,
    pub warmup_epochs: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Erm,
            lambda: 0.05,
            hops: 4,
            pair_budget: 256,
            ablations: Ablations::default(),
            warmup_epochs: 1,
        }
    }
}

/// Supervision for the ERM term.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    /// `N × 1` real targets.
    Regression(&'a Tensor),
}

/// Training nodes grouped by environment; nodes with unknown environment
/// (`-1`) are left out.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EnvPartition {
    pub groups: BTreeMap<EnvId, Vec<usize>>,
}

impl EnvPartition {
    pub fn from_nodes(graph: &Graph, nodes: &[usize]) -> Self {
        let mut groups: BTreeMap<EnvId, Vec<usize>> = BTreeMap::new();
        for &i in nodes {
            let e = graph.envs()[i];
            if e >= 0 {
                groups.entry(e).or_default().push(i);
            }
        }
        Self { groups }
    }

    pub fn num_envs(&self) -> usize {
        self.groups.len()
    }
}
