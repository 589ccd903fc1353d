use serde::{Deserialize, Serialize};

use super::{sample_env_means, OracleScenario};
use crate::error::{ConfigError, OracleError};
use crate::synth::{normal, ShiftKind};

/// Minimum Monte-Carlo draws per environment.
pub const MIN_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NongraphReport {
    pub theta: [f64; 2],
    pub samples: usize,
    pub env_means: Vec<f64>,
    pub erm_grad: [f64; 2],
    pub irm_grad: [f64; 2],
    pub vrex_grad: [f64; 2],
    pub erm_norm: f64,
    pub irm_norm: f64,
    pub vrex_norm: f64,
    /// `∇_w R(e)` at `w = 1` per environment.
    pub dummy_grads: Vec<MeanSe>,
    /// `10 / √samples`.
    pub tolerance: f64,
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Monte-Carlo gradients of ERM `E_e R(e)`, IRMv1 `E_e (∇_w R(e))²` and
/// VREx `Var_e R(e)` for `f = θ₁x₁ + θ₂x₂` on the graph-free model
/// `y = x₁ + n₁`, `x₂ = y + n₂ + ε` (concept) or `x₂ = n₂ + ε`
/// (covariate), with `ε ~ N(μᵉ, within²)`.
pub fn nongraph_stationarity(
    scenario: &OracleScenario,
    theta1: f64,
    theta2: f64,
    samples: usize,
) -> Result<NongraphReport, OracleError> {
    if samples < MIN_SAMPLES {
        return Err(ConfigError::Value { key: "samples".into(), msg: format!("need at least {MIN_SAMPLES}") }.into());
    }
    let env_means = sample_env_means(scenario, scenario.num_envs, &mut scenario.rng("nongraph/means"));
    let mut rng = scenario.rng(&format!("nongraph/draws/{samples}"));
    let sn = scenario.noise_std;
    let s = samples as f64;

    let mut risks = Vec::new();
    let mut risk_grads = Vec::new();
    let mut dummy = Vec::new();
    let mut dummy_grads = Vec::new();
    for &mu in &env_means {
        let (mut rr, mut rx1, mut rx2, mut g, mut gg, mut d1, mut d2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..samples {
            let x1 = normal(&mut rng);
            let y = x1 + sn * normal(&mut rng);
            let eps = mu + scenario.within_std * normal(&mut rng);
            let n2 = sn * normal(&mut rng);
            let x2 = match scenario.shift {
                ShiftKind::Concept => y + n2 + eps,
                ShiftKind::Covariate => n2 + eps,
            };
            let f = theta1 * x1 + theta2 * x2;
            let r = f - y;
            rr += r * r;
            rx1 += r * x1;
            rx2 += r * x2;
            let gi = 2.0 * f * r;
            g += gi;
            gg += gi * gi;
            d1 += x1 * (r + f);
            d2 += x2 * (r + f);
        }
        risks.push(rr / s);
        risk_grads.push([2.0 * rx1 / s, 2.0 * rx2 / s]);
        let mean = g / s;
        let var = (gg / s - mean * mean).max(0.0) * s / (s - 1.0);
        dummy.push(MeanSe { mean, se: (var / s).sqrt() });
        dummy_grads.push([2.0 * d1 / s, 2.0 * d2 / s]);
    }

    let ne = env_means.len() as f64;
    let mean_risk = risks.iter().sum::<f64>() / ne;
    let mut erm = [0.0; 2];
    let mut irm = [0.0; 2];
    let mut vrex = [0.0; 2];
    for e in 0..env_means.len() {
        for j in 0..2 {
            erm[j] += risk_grads[e][j] / ne;
            irm[j] += 2.0 * dummy[e].mean * dummy_grads[e][j] / ne;
            vrex[j] += 2.0 * (risks[e] - mean_risk) * risk_grads[e][j] / ne;
        }
    }
    Ok(NongraphReport {
        theta: [theta1, theta2],
        samples,
        env_means,
        erm_grad: erm,
        irm_grad: irm,
        vrex_grad: vrex,
        erm_norm: norm(erm),
        irm_norm: norm(irm),
        vrex_norm: norm(vrex),
        dummy_grads: dummy,
        tolerance: 10.0 / s.sqrt(),
    })
}
