//! Soft edge mask: an auxiliary encoder scores each edge by the inner
//! product of its endpoint embeddings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::mpnn::{mpnn_forward, MpnnArch, MpnnParams};
use super::GraphContext;
use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

/// Mask values are kept inside `[MASK_FLOOR, 1 − MASK_FLOOR]`.
pub const MASK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Sigmoid,
    MinMax,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Sigmoid => "sigmoid",
            MaskMode::MinMax => "minmax",
        })
    }
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(MaskMode::Sigmoid),
            "minmax" => Ok(MaskMode::MinMax),
            other => Err(format!("unknown mask mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMaskParams {
    pub encoder: MpnnParams,
    pub mode: MaskMode,
}

impl EdgeMaskParams {
    /// Encoder with the main model's architecture and its own weights.
    pub fn init(arch: MpnnArch, mode: MaskMode, seed: u64) -> Result<Self, TensorError> {
        Ok(Self { encoder: MpnnParams::init(arch, seed, "mask-encoder")?, mode })
    }
}

/// One weight per undirected edge (`E × 1`), symmetric by construction.
pub fn edge_mask_apply(
    tape: &mut Tape,
    params: &EdgeMaskParams,
    vars: &[Var],
    ctx: &GraphContext,
    x: &Tensor,
) -> Result<Var, TensorError> {
    let enc = mpnn_forward(tape, &params.encoder, vars, ctx, x, None)?;
    edge_scores_to_mask(tape, enc.representation, ctx, params.mode)
}

/// Maps node embeddings to clamped edge weights.
pub fn edge_scores_to_mask(
    tape: &mut Tape,
    embeddings: Var,
    ctx: &GraphContext,
    mode: MaskMode,
) -> Result<Var, TensorError> {
    let width = tape.value(embeddings).cols();
    let a = tape.gather_rows(embeddings, &ctx.edge_src)?;
    let b = tape.gather_rows(embeddings, &ctx.edge_dst)?;
    let prod = tape.hadamard(a, b)?;
    let ones = tape.constant(Tensor::filled(&[width, 1], 1.0));
    let scores = tape.matmul(prod, ones)?;
    let unit = match mode {
        MaskMode::Sigmoid => tape.sigmoid(scores)?,
        MaskMode::MinMax => tape.min_max_normalize(scores)?,
    };
    let squeezed = tape.scale(unit, 1.0 - 2.0 * MASK_FLOOR)?;
    tape.add_scalar(squeezed, MASK_FLOOR)
}

/// Plain mask values outside of training.
pub fn edge_mask_values(params: &EdgeMaskParams, ctx: &GraphContext, x: &Tensor) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.encoder.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let m = edge_mask_apply(&mut tape, params, &vars, ctx, x)?;
    Ok(tape.value(m).clone())
}
