//! Numerical checks of the claims about the scalar-parameter linear GNN:
//! which objectives are stationary at the invariant solution, how the
//! optimal readout depends on the environment when the learned depth is
//! wrong, and where VREx admits solutions that keep spurious features.
//!
//! Two environment families are used. Independent environments draw their
//! own graph and invariant features. Shared-structure environments keep one
//! graph and one `X₁` and differ only in the spurious offset `εᵉ` and in the
//! noise, which is the setting where the causal pattern is stable across
//! environments.

mod cia;
mod claims;
mod nongraph;
mod recovery;
mod theta1;
mod vrex;


pub use cia::{cia_gradients_at, cia_optimum_check, CiaOptimumReport};
pub use claims::{cia_claim, nongraph_claim, run_claims, theta1_claim, vrex_claim, Claim, ClaimReport, CIA_DEPTHS};
pub use nongraph::{nongraph_stationarity, MIN_SAMPLES, MeanSe, NongraphReport};
pub(crate) use recovery::random_init;
pub use recovery::{end_to_end_recovery, recovery_scenario, SPURIOUS_SHARE, Diagnosis, RecoveryConfig, RecoveryReport};
pub use theta1::{per_env_theta1, theta1_quotient, Theta1Report};
pub use vrex::{find_vrex_spurious_root, MIN_SPURIOUS_THETA2, vrex_constants, vrex_stationarity_residual, VrexConstants, VrexRoot};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::ConfigError;
use crate::graph::{build_normalized, CsrMatrix};
use crate::rng::{stream, StreamRng};
use crate::synth::{local_graph, multi_env_topology, normal, propagate, ShiftKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScenario {
    pub shift: ShiftKind,
    /// GNN depth `L`; the model has `L − 1` mixing layers.
    pub depth: usize,
    /// Depth `k` of the causal pattern.
    pub causal_depth: usize,
    /// Depth `m` of the spurious pattern (concept shift).
    pub spurious_depth: usize,
    /// Depth `s` aggregated by the special VREx solution.
    pub learned_depth: usize,
    pub num_envs: usize,
    /// Environments drawn when estimating the VREx constants.
    pub env_samples: usize,
    /// Monte-Carlo noise draws for gradient estimates.
    pub samples: usize,
    /// Cross-environment variance `σ²` of the spurious offsets.
    pub sigma2: f64,
    /// Center of the spurious offsets, `μᵉ ~ N(center, σ²)`.
    pub env_mean_center: f64,
    pub within_std: f64,
    pub noise_std: f64,
    pub nodes_per_env: usize,
    pub edge_probability: f64,
    pub x1_constant: Option<f64>,
    pub seed: u64,
}

impl Default for OracleScenario {
    fn default() -> Self {
        Self {
            shift: ShiftKind::Concept,
            depth: 3,
            causal_depth: 1,
            spurious_depth: 1,
            learned_depth: 2,
            num_envs: 8,
            env_samples: 2000,
            samples: 100_000,
            sigma2: 1.0,
            env_mean_center: 0.5,
            within_std: 0.5,
            noise_std: 1.0,
            nodes_per_env: 30,
            edge_probability: 0.1,
            x1_constant: None,
            seed: 0,
        }
    }
}

impl OracleScenario {
    /// Reads a scenario file. `shift`, `depth`, `k` and `s` are required;
    /// everything else falls back to the defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let shift: String = kv.require("shift")?;
        let shift = shift.parse().map_err(|msg| ConfigError::Value { key: "shift".into(), msg })?;
        let s = Self {
            shift,
            depth: kv.require("depth")?,
            causal_depth: kv.require("k")?,
            spurious_depth: kv.get_or("m", d.spurious_depth)?,
            learned_depth: kv.require("s")?,
            num_envs: kv.get_or("envs", d.num_envs)?,
            env_samples: kv.get_or("env_samples", d.env_samples)?,
            samples: kv.get_or("samples", d.samples)?,
            sigma2: kv.get_or("sigma2", d.sigma2)?,
            env_mean_center: kv.get_or("env_mean_center", d.env_mean_center)?,
            within_std: kv.get_or("within_std", d.within_std)?,
            noise_std: kv.get_or("noise_std", d.noise_std)?,
            nodes_per_env: kv.get_or("nodes", d.nodes_per_env)?,
            edge_probability: kv.get_or("edge_probability", d.edge_probability)?,
            x1_constant: kv.get("x1_constant")?,
            seed: kv.get_or("seed", d.seed)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: String| Err(ConfigError::Value { key: key.into(), msg });
        if self.depth < 2 {
            return bad("depth", "need at least one mixing layer (depth ≥ 2)".into());
        }
        if self.causal_depth == 0 || self.causal_depth >= self.depth {
            return bad("k", format!("need 1 ≤ k < depth = {}", self.depth));
        }
        if self.learned_depth == 0 || self.learned_depth >= self.depth {
            return bad("s", format!("need 1 ≤ s < depth = {}", self.depth));
        }
        if self.shift == ShiftKind::Concept && self.spurious_depth == 0 {
            return bad("m", "must be at least 1 under concept shift".into());
        }
        if self.num_envs < 2 {
            return bad("envs", "need at least 2 environments".into());
        }
        if self.nodes_per_env < 2 {
            return bad("nodes", "need at least 2 nodes".into());
        }
        if !(self.edge_probability > 0.0 && self.edge_probability < 1.0) {
            return bad("edge_probability", "must lie in (0, 1)".into());
        }
        if self.sigma2.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("sigma2", "must be positive".into());
        }
        if self.samples == 0 || self.env_samples < 2 {
            return bad("samples", "need at least one sample and two sampled environments".into());
        }
        Ok(())
    }

    pub(crate) fn rng(&self, label: &str) -> StreamRng {
        stream(self.seed, &format!("oracle/{label}"))
    }
}

/// Graph and invariant features of one environment.
#[derive(Debug, Clone)]
pub struct OracleEnv {
    pub tilde_a: Arc<CsrMatrix>,
    pub x1: Tensor,
}

pub(crate) fn sample_structure(scenario: &OracleScenario, rng: &mut StreamRng) -> OracleEnv {
    let n = scenario.nodes_per_env;
    let (_, mut blocks) = multi_env_topology(&[n], scenario.edge_probability, 0.0, rng);
    let g = local_graph(n, blocks.pop().unwrap_or_default());
    let x1 = (0..n).map(|_| scenario.x1_constant.unwrap_or_else(|| normal(rng))).collect();
    OracleEnv { tilde_a: Arc::new(build_normalized(&g).tilde_a), x1: Tensor::matrix(n, 1, x1).expect("n×1") }
}

/// Per-environment spurious offsets `μᵉ ~ N(center, σ²)`.
pub(crate) fn sample_env_means(scenario: &OracleScenario, count: usize, rng: &mut StreamRng) -> Vec<f64> {
    let sd = scenario.sigma2.sqrt();
    (0..count).map(|_| scenario.env_mean_center + sd * normal(rng)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One Monte-Carlo batch of a shared-structure environment: every column
/// is an independent draw of `(X₁, X₂, Y)` on the same graph.
pub(crate) struct EnvBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub y: Tensor,
}

pub(crate) fn sample_batch(
    scenario: &OracleScenario,
    env: &OracleEnv,
    mu: f64,
    cols: usize,
    noisy: bool,
    rng: &mut StreamRng,
) -> EnvBatch {
    let n = env.x1.rows();
    let noise = |rng: &mut StreamRng, sd: f64| if noisy { sd * normal(rng) } else { 0.0 };
    let x1 = Tensor::matrix(n, cols, env.x1.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect())
        .expect("n×cols");
    let mut y = propagate(&env.tilde_a, &x1, scenario.causal_depth);
    for v in y.data_mut() {
        *v += noise(rng, scenario.noise_std);
    }
    let mut x2 = match scenario.shift {
        ShiftKind::Concept => propagate(&env.tilde_a, &y, scenario.spurious_depth),
        ShiftKind::Covariate => Tensor::zeros(&[n, cols]),
    };
    for v in x2.data_mut() {
        *v += noise(rng, scenario.noise_std) + mu + noise(rng, scenario.within_std);
    }
    EnvBatch { x1, x2, y }
}
