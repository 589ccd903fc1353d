//! Stationarity system of VREx when the lower layers pass the spurious
//! branch through and aggregate the invariant branch `s` times. The two
//! polynomial equations below are evaluated as printed in the analysis;
//! their constants are Monte-Carlo averages over sampled environments.

use serde::{Deserialize, Serialize};

use super::{dot, sample_env_means, sample_structure, OracleScenario};
use crate::synth::{normal, propagate, ShiftKind};

/// Monte-Carlo constants `c₁ … c₇` (covariate shift uses `c₁ … c₅`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrexConstants {
    pub shift: ShiftKind,
    pub c: Vec<f64>,
    /// Average node count `N̄`.
    pub mean_nodes: f64,
    pub sigma2: f64,
    pub env_samples: usize,
}

/// Estimates the constants from `scenario.env_samples` independently
/// drawn environments.
pub fn vrex_constants(scenario: &OracleScenario) -> VrexConstants {
    let mut rng = scenario.rng("vrex/constants");
    let (k, s) = (scenario.causal_depth, scenario.learned_depth);
    let sigma2 = scenario.sigma2;
    let count = scenario.env_samples;
    let means = sample_env_means(scenario, count, &mut scenario.rng("vrex/means"));
    let mut acc = [0.0; 7];
    let mut nodes = 0.0;
    for &mu in &means {
        let env = sample_structure(scenario, &mut rng);
        let n = env.x1.rows() as f64;
        nodes += n;
        let hs = propagate(&env.tilde_a, &env.x1, s);
        let hk = propagate(&env.tilde_a, &env.x1, k);
        let (hs, hk) = (hs.data(), hk.data());
        let eps: Vec<f64> = (0..hs.len()).map(|_| mu + scenario.within_std * normal(&mut rng)).collect();
        let ss = dot(hs, hs);
        let ks = dot(hk, hs);
        let ak = {
            let mut pk = env.tilde_a.to_dense();
            let base = pk.clone();
            for _ in 1..k {
                pk = base.matmul(&pk).expect("square");
            }
            pk.sq_norm()
        };
        let e3 = dot(&eps, &eps) * dot(&eps, hs);
        let one_s: f64 = hs.iter().sum();
        let one_k: f64 = hk.iter().sum();
        let terms = match scenario.shift {
            ShiftKind::Concept => [ss, n * ss, one_s, one_k, n * (ks + ak + n * (1.0 + sigma2)), ks, e3],
            ShiftKind::Covariate => [ss, ks, e3 * sigma2, one_k * sigma2, n * (ak + n * (1.0 + sigma2)), 0.0, 0.0],
        };
        for (a, t) in acc.iter_mut().zip(terms) {
            *a += t;
        }
    }
    let len = match scenario.shift {
        ShiftKind::Concept => 7,
        ShiftKind::Covariate => 5,
    };
    VrexConstants {
        shift: scenario.shift,
        c: acc[..len].iter().map(|a| a / count as f64).collect(),
        mean_nodes: nodes / count as f64,
        sigma2,
        env_samples: count,
    }
}

/// The two equations and the sum of absolute values of their terms, in
/// that order.
fn equations(c: &VrexConstants, t1: f64, t2: f64) -> ([f64; 2], [f64; 2]) {
    let (nb, s2) = (c.mean_nodes, c.sigma2);
    let c = &c.c;
    match c.len() {
        7 => {
            let inner = nb * s2 * (2.0 * c[0] * (t1 + t2) - c[5]) * t2;
            let a = [
                (3.0 * c[0] * t1 * t2 + c[0] * t2 * t2 - 2.0 * c[5] * t2) * s2,
                -inner,
                c[6] * t2,
            ];
            let b = [(inner - c[6]) * (c[2] - c[3]) * t2, -(c[1] * (t1 + t2) - c[4]) * t2 * t2];
            (
                [a.iter().sum(), b.iter().sum()],
                [a.iter().map(|x| x.abs()).sum(), b.iter().map(|x| x.abs()).sum()],
            )
        }
        _ => {
            let lin = c[2] * t2 - nb * c[0] * s2 * t1 * t2 + nb * c[1] * s2 * t2;
            let a = [c[0] * s2 * (2.0 * t1 * t2 + t2 * t2 - 2.0 * c[1] * s2 * t2), lin];
            let b = [lin * c[3], -c[4] * t2 * t2];
            (
                [a.iter().sum(), b.iter().sum()],
                [
                    a[0].abs() + (c[2] * t2).abs() + (nb * c[0] * s2 * t1 * t2).abs() + (nb * c[1] * s2 * t2).abs(),
                    b.iter().map(|x| x.abs()).sum(),
                ],
            )
        }
    }
}

/// Raw residuals of the two stationarity equations at `(θ₁, θ₂)`. Every
/// term carries a factor `θ₂`, so both vanish on the `θ₂ = 0` branch.
pub fn vrex_stationarity_residual(constants: &VrexConstants, theta1: f64, theta2: f64) -> [f64; 2] {
    equations(constants, theta1, theta2).0
}

/// Residuals divided by `θ₂` and by the magnitude of their terms, so a
/// root off the trivial branch is a zero of this map.
fn reduced(constants: &VrexConstants, t1: f64, t2: f64) -> [f64; 2] {
    let (r, _) = equations(constants, t1, t2);
    [r[0] / t2, r[1] / t2]
}

fn normalized(constants: &VrexConstants, t1: f64, t2: f64) -> [f64; 2] {
    let (r, mag) = equations(constants, t1, t2);
    [r[0] / mag[0].max(f64::MIN_POSITIVE), r[1] / mag[1].max(f64::MIN_POSITIVE)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrexRoot {
    pub theta1: f64,
    pub theta2: f64,
    /// Residuals relative to the magnitude of the terms of each equation.
    pub residual: [f64; 2],
    pub constants: VrexConstants,
}

/// Smallest `|θ₂|` accepted as a non-trivial root.
pub const MIN_SPURIOUS_THETA2: f64 = 0.05;
const GRID: usize = 81;
const RANGE: f64 = 2.0;

fn newton(constants: &VrexConstants, mut t: [f64; 2]) -> Option<[f64; 2]> {
    let f = |p: [f64; 2]| reduced(constants, p[0], p[1]);
    let norm = |v: [f64; 2]| v[0].hypot(v[1]);
    let mut fx = f(t);
    for _ in 0..100 {
        if norm(fx) < 1e-13 {
            break;
        }
        let h = 1e-7;
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut tp = t;
            tp[j] += h;
            let fp = f(tp);
            for i in 0..2 {
                jac[i][j] = (fp[i] - fx[i]) / h;
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return None;
        }
        let step = [
            (jac[1][1] * fx[0] - jac[0][1] * fx[1]) / det,
            (-jac[1][0] * fx[0] + jac[0][0] * fx[1]) / det,
        ];
        let mut damp = 1.0;
        loop {
            let cand = [t[0] - damp * step[0], t[1] - damp * step[1]];
            let fc = f(cand);
            if fc.iter().all(|v| v.is_finite()) && norm(fc) < norm(fx) {
                t = cand;
                fx = fc;
                break;
            }
            damp *= 0.5;
            if damp < 1e-10 {
                return (norm(fx) < 1e-9).then_some(t);
            }
        }
    }
    Some(t)
}

/// Searches `[−2, 2]²` on an 81 × 81 grid for the cells where the reduced
/// residual is smallest, refines each with damped Newton and returns the
/// refined root inside the box with `|θ₂| > 0.05` and the smallest
/// normalized residual.
pub fn find_vrex_spurious_root(constants: &VrexConstants) -> Option<VrexRoot> {
    let step = 2.0 * RANGE / (GRID - 1) as f64;
    let mut cells = Vec::new();
    for i in 0..GRID {
        for j in 0..GRID {
            let (t1, t2) = (-RANGE + i as f64 * step, -RANGE + j as f64 * step);
            if t2.abs() <= MIN_SPURIOUS_THETA2 {
                continue;
            }
            let r = normalized(constants, t1, t2);
            cells.push((r[0].hypot(r[1]), t1, t2));
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<VrexRoot> = None;
    for &(_, t1, t2) in cells.iter().take(40) {
        let Some([r1, r2]) = newton(constants, [t1, t2]) else { continue };
        if r2.abs() <= MIN_SPURIOUS_THETA2 || !r1.is_finite() || r1.abs() > RANGE || r2.abs() > RANGE {
            continue;
        }
        let residual = normalized(constants, r1, r2);
        let score = residual[0].hypot(residual[1]);
        if best.as_ref().is_none_or(|b| score < b.residual[0].hypot(b.residual[1])) {
            best = Some(VrexRoot { theta1: r1, theta2: r2, residual, constants: constants.clone() });
        }
    }
    best
}
