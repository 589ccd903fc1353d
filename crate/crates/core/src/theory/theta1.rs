use serde::{Deserialize, Serialize};

use super::{dot, sample_structure, OracleScenario};
use crate::graph::CsrMatrix;
use crate::synth::propagate;
use crate::tensor::Tensor;

/// `((Ã)ᵏX₁)ᵀ(Ã)ˢX₁ / ‖(Ã)ˢX₁‖²`, the readout that makes the IRMv1
/// dummy gradient vanish in one environment when the learned depth is `s`.
pub fn theta1_quotient(tilde_a: &CsrMatrix, x1: &Tensor, k: usize, s: usize) -> f64 {
    let u = propagate(tilde_a, x1, k);
    let w = propagate(tilde_a, x1, s);
    let den = dot(w.data(), w.data());
    assert!(den > 0.0, "degenerate invariant features: ‖Ãˢ X₁‖ = 0");
    dot(u.data(), w.data()) / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta1Report {
    pub s: usize,
    pub k: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator).
    pub std: f64,
}

impl Theta1Report {
    pub fn from_values(k: usize, s: usize, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { s, k, values, mean, std }
    }
}

/// Quotient per independently drawn environment.
pub fn per_env_theta1(scenario: &OracleScenario, s: usize) -> Theta1Report {
    let mut rng = scenario.rng("theta1/envs");
    let values = (0..scenario.num_envs)
        .map(|_| {
            let env = sample_structure(scenario, &mut rng);
            theta1_quotient(&env.tilde_a, &env.x1, scenario.causal_depth, s)
        })
        .collect();
    Theta1Report::from_values(scenario.causal_depth, s, values)
}
