use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{sample_batch, sample_env_means, sample_structure, OracleScenario};
use crate::autodiff::Tape;
use crate::error::OracleError;
use crate::models::{theory_gnn_tape, TheoryGnnParams, TheoryVars};
use crate::synth::ShiftKind;
use crate::tensor::Tensor;

const CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiaOptimumReport {
    pub shift: ShiftKind,
    pub depth: usize,
    pub causal_depth: usize,
    pub samples: usize,
    /// Flat order of [`TheoryGnnParams::to_vec`].
    pub erm_grad: Vec<f64>,
    pub cia_grad: Vec<f64>,
    pub erm_norm: f64,
    pub cia_norm: f64,
    pub cia_loss: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Gradients of the mean squared error and of the cross-environment
/// alignment at the invariant optimum.
pub fn cia_optimum_check(scenario: &OracleScenario) -> Result<CiaOptimumReport, OracleError> {
    scenario.validate()?;
    let params = TheoryGnnParams::invariant_optimum(scenario.depth, scenario.causal_depth);
    cia_gradients_at(scenario, &params, true)
}

/// Monte-Carlo gradients at `params` over shared-structure environments,
/// `scenario.samples` draws in total split evenly over the environments.
/// The alignment compares the prediction for node `i` in environment `e`
/// with node `i` in every other environment `e'` under the same draw.
/// With `noisy = false` the noise terms are dropped and only the
/// environment offsets differ.
pub fn cia_gradients_at(
    scenario: &OracleScenario,
    params: &TheoryGnnParams,
    noisy: bool,
) -> Result<CiaOptimumReport, OracleError> {
    scenario.validate()?;
    let mut rng = scenario.rng("cia/structure");
    let env = sample_structure(scenario, &mut rng);
    let means = sample_env_means(scenario, scenario.num_envs, &mut scenario.rng("cia/means"));
    let tilde = Arc::clone(&env.tilde_a);
    let n = env.x1.rows();
    let n_env = means.len();
    // `samples` counts draws over all environments together.
    let total = scenario.samples.div_ceil(n_env);
    let n_pairs = n_env * (n_env - 1) / 2;
    let width = params.to_vec().len();
    let mut erm_grad = vec![0.0; width];
    let mut cia_grad = vec![0.0; width];
    let mut cia_loss = 0.0;
    let mut noise_rng = scenario.rng("cia/noise");
    let mut done = 0;
    while done < total {
        let cols = CHUNK.min(total - done);
        done += cols;
        let mut tape = Tape::new();
        let vars = TheoryVars::register(&mut tape, params);
        let mut preds = Vec::with_capacity(n_env);
        let mut erm = None;
        for &mu in &means {
            let batch = sample_batch(scenario, &env, mu, cols, noisy, &mut noise_rng);
            let (x1, x2) = (tape.constant(batch.x1), tape.constant(batch.x2));
            let (_, _, pred) = theory_gnn_tape(&mut tape, &vars, &tilde, x1, x2)?;
            let y = tape.constant(batch.y);
            let r = tape.sub(pred, y)?;
            let sq = tape.sq_l2_norm(r)?;
            erm = Some(match erm {
                Some(a) => tape.add(a, sq)?,
                None => sq,
            });
            preds.push(pred);
        }
        let erm = tape.scale(erm.expect("at least two envs"), 1.0 / (n_env * n * total) as f64)?;
        let mut cia = tape.constant(Tensor::scalar(0.0));
        for a in 0..n_env {
            for b in a + 1..n_env {
                let d = tape.sub(preds[a], preds[b])?;
                let sq = tape.sq_l2_norm(d)?;
                cia = tape.add(cia, sq)?;
            }
        }
        let cia = tape.scale(cia, 1.0 / (n_pairs * n * total) as f64)?;
        cia_loss += tape.value(cia).item();
        for (root, out) in [(erm, &mut erm_grad), (cia, &mut cia_grad)] {
            let grads = tape.backward(root)?;
            for (o, v) in out.iter_mut().zip(&vars.scalars) {
                *o += grads.get(*v).item();
            }
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tolerance = 10.0 / (scenario.samples as f64).sqrt();
    let (erm_norm, cia_norm) = (norm(&erm_grad), norm(&cia_grad));
    Ok(CiaOptimumReport {
        shift: scenario.shift,
        depth: scenario.depth,
        causal_depth: scenario.causal_depth,
        samples: total * n_env,
        erm_grad,
        cia_grad,
        erm_norm,
        cia_norm,
        cia_loss,
        tolerance,
        pass: erm_norm < tolerance && cia_norm < tolerance,
    })
}
