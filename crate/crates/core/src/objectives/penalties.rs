use super::{ObjectiveConfig, ObjectiveKind, PairSet, Targets};
use super::EnvPartition;
use crate::autodiff::{Tape, Var};
use crate::error::ObjectiveError;
use crate::tensor::Tensor;

/// Mean cross-entropy or squared error over `rows`.
pub fn erm_loss(tape: &mut Tape, output: Var, targets: Targets<'_>, rows: &[usize]) -> Result<Var, ObjectiveError> {
    if rows.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    Ok(match targets {
        Targets::Classes(labels) => {
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            tape.cross_entropy_with_logits(output, rows, &y)?
        }
        Targets::Regression(y) => tape.mse(output, y, rows)?,
    })
}

/// One ERM loss per environment, in environment-id order.
pub fn per_env_losses(
    tape: &mut Tape,
    output: Var,
    targets: Targets<'_>,
    partition: &EnvPartition,
) -> Result<Vec<Var>, ObjectiveError> {
    partition.groups.values().map(|rows| erm_loss(tape, output, targets, rows)).collect()
}

/// Population variance of the per-environment losses.
pub fn vrex_penalty(tape: &mut Tape, losses: &[Var]) -> Result<Var, ObjectiveError> {
    if losses.len() < 2 {
        return Err(ObjectiveError::TooFewEnvironments(losses.len()));
    }
    let n = losses.len() as f64;
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, 1.0 / n)?;
    let mut acc: Option<Var> = None;
    for &l in losses {
        let d = tape.sub(l, mean)?;
        let sq = tape.hadamard(d, d)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    Ok(tape.scale(acc.expect("at least two losses"), 1.0 / n)?)
}

/// `Σ_e g_e²` where `g_e` is the derivative at `w = 1` of the environment
/// loss with outputs scaled by `w`, written out in closed form so that a
/// first-order backward pass differentiates it:
/// cross-entropy `g_e = (1/N_e) Σᵢ (softmax(zᵢ) − yᵢ)·zᵢ`,
/// squared error `g_e = (2/N_e) Σᵢ zᵢ(zᵢ − yᵢ)`.
pub fn irmv1_penalty(
    tape: &mut Tape,
    output: Var,
    targets: Targets<'_>,
    partition: &EnvPartition,
) -> Result<Var, ObjectiveError> {
    let mut acc: Option<Var> = None;
    for rows in partition.groups.values() {
        if rows.is_empty() {
            return Err(ObjectiveError::EmptyMask);
        }
        let z = tape.gather_rows(output, rows)?;
        let width = tape.value(z).cols();
        let g = match targets {
            Targets::Classes(labels) => {
                let mut onehot = Tensor::zeros(&[rows.len(), width]);
                for (k, &i) in rows.iter().enumerate() {
                    onehot.set(k, labels[i], 1.0);
                }
                let y = tape.constant(onehot);
                let p = tape.row_softmax(z)?;
                let d = tape.sub(p, y)?;
                let dz = tape.hadamard(d, z)?;
                let s = tape.sum(dz)?;
                tape.scale(s, 1.0 / rows.len() as f64)?
            }
            Targets::Regression(y) => {
                let mut sel = Tensor::zeros(&[rows.len(), width]);
                for (k, &i) in rows.iter().enumerate() {
                    sel.row_mut(k).copy_from_slice(y.row(i));
                }
                let y = tape.constant(sel);
                let d = tape.sub(z, y)?;
                let dz = tape.hadamard(d, z)?;
                let s = tape.sum(dz)?;
                tape.scale(s, 2.0 / rows.len() as f64)?
            }
        };
        let sq = tape.hadamard(g, g)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Mean over non-empty classes of the mean over pairs of
/// `w_ij · ‖φ(i) − φ(j)‖²`; 0 (with a warning) for an empty pair set.
pub fn alignment_loss(tape: &mut Tape, representations: Var, pairs: &PairSet) -> Result<Var, ObjectiveError> {
    let active: Vec<_> = pairs.classes.iter().filter(|c| !c.is_empty()).collect();
    if active.is_empty() {
        log::warn!("alignment loss over an empty pair set");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut coef = Vec::new();
    let n_classes = active.len() as f64;
    for class in &active {
        let share = 1.0 / (class.len() as f64 * n_classes);
        for p in class.iter() {
            left.push(p.i);
            right.push(p.j);
            coef.push(p.weight * share);
        }
    }
    let width = tape.value(representations).cols();
    let a = tape.gather_rows(representations, &left)?;
    let b = tape.gather_rows(representations, &right)?;
    let d = tape.sub(a, b)?;
    let sq = tape.hadamard(d, d)?;
    let ones = tape.constant(Tensor::filled(&[width, 1], 1.0));
    let per_pair = tape.matmul(sq, ones)?;
    let w = tape.constant(Tensor::matrix(coef.len(), 1, coef)?);
    let weighted = tape.hadamard(per_pair, w)?;
    Ok(tape.sum(weighted)?)
}

/// ERM term and the objective-specific penalty of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub erm: Var,
    /// `None` while the penalty is gated off.
    pub penalty: Option<Var>,
    pub total: Var,
}

/// `erm + λ · penalty`, with the penalty skipped for ERM, for `λ = 0`, and
/// for epochs before `warmup_epochs`. `penalty` is only called when the
/// penalty is active.
pub fn total_loss(
    tape: &mut Tape,
    config: &ObjectiveConfig,
    epoch: usize,
    erm: Var,
    penalty: impl FnOnce(&mut Tape) -> Result<Var, ObjectiveError>,
) -> Result<LossTerms, ObjectiveError> {
    let active = config.kind != ObjectiveKind::Erm && config.lambda > 0.0 && epoch >= config.warmup_epochs;
    if !active {
        return Ok(LossTerms { erm, penalty: None, total: erm });
    }
    let p = penalty(tape)?;
    let scaled = tape.scale(p, config.lambda)?;
    let total = tape.add(erm, scaled)?;
    Ok(LossTerms { erm, penalty: Some(p), total })
}
