//! Message-passing classifiers: GCN-style, mean-aggregation and single-head
//! additive attention layers, with an optional split into two independent
//! towers over the two halves of the input features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GraphContext;
use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// `Ã H W + b`.
    Gcn,
    /// `row_norm_a · H W + H W_self + b`.
    Mean,
    /// Softmax-weighted neighbor sum plus a self term.
    Attention,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Gcn => "gcn",
            Aggregation::Mean => "mean",
            Aggregation::Attention => "attention",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcn" => Ok(Aggregation::Gcn),
            "mean" => Ok(Aggregation::Mean),
            "attention" | "gat" => Ok(Aggregation::Attention),
            other => Err(format!("unknown aggregation {other:?}")),
        }
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Map from representation to logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    Linear,
    /// Two towers of width `num_classes` whose outputs are added: each
    /// tower's output is its exact contribution to the logits.
    TowerSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpnnArch {
    pub aggregation: Aggregation,
    pub input_dim: usize,
    /// Total representation width (summed over towers).
    pub hidden: usize,
    pub layers: usize,
    /// 1, or 2 for separate towers over the two input halves.
    pub towers: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub head: Head,
    /// Per-layer biases; without them each tower's output is linear in its
    /// own input block.
    #[serde(default = "yes")]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl MpnnArch {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: &str| Err(TensorError::Invalid(m.to_string()));
        if self.layers == 0 || self.hidden == 0 || self.num_classes == 0 || self.input_dim == 0 {
            return bad("layers, hidden, input and class counts must be positive");
        }
        if self.towers != 1 && self.towers != 2 {
            return bad("towers must be 1 or 2");
        }
        if self.input_dim % self.towers != 0 || self.hidden % self.towers != 0 {
            return bad("input and hidden widths must split evenly across towers");
        }
        if self.head == Head::TowerSum && (self.towers != 2 || self.hidden != 2 * self.num_classes) {
            return bad("tower-sum head needs two towers of width num_classes");
        }
        Ok(())
    }

    fn tower_in(&self) -> usize {
        self.input_dim / self.towers
    }

    fn tower_width(&self) -> usize {
        self.hidden / self.towers
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.tower_width();
        let mut out = Vec::new();
        for t in 0..self.towers {
            for l in 0..self.layers {
                let fan_in = if l == 0 { self.tower_in() } else { w };
                let p = format!("tower{t}.layer{l}");
                out.push((format!("{p}.weight"), vec![fan_in, w]));
                if self.bias {
                    out.push((format!("{p}.bias"), vec![w]));
                }
                if self.aggregation != Aggregation::Gcn {
                    out.push((format!("{p}.self_weight"), vec![fan_in, w]));
                }
                if self.aggregation == Aggregation::Attention {
                    out.push((format!("{p}.att_src"), vec![w, 1]));
                    out.push((format!("{p}.att_dst"), vec![w, 1]));
                }
            }
        }
        if self.head == Head::Linear {
            out.push(("head.weight".into(), vec![self.hidden, self.num_classes]));
            out.push(("head.bias".into(), vec![self.num_classes]));
        }
        out
    }

    fn per_layer(&self) -> usize {
        let extra = match self.aggregation {
            Aggregation::Gcn => 0,
            Aggregation::Mean => 1,
            Aggregation::Attention => 3,
        };
        1 + usize::from(self.bias) + extra
    }
}

/// Architecture plus its parameter tensors in [`MpnnArch::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MpnnParams {
    pub arch: MpnnArch,
    pub tensors: Vec<Tensor>,
}

impl MpnnParams {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(arch: MpnnArch, seed: u64, label: &str) -> Result<Self, TensorError> {
        arch.validate()?;
        let mut rng = stream(seed, &format!("{label}/init"));
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("bias") {
                    return Tensor::zeros(&shape);
                }
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("layout")
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn zeros(arch: MpnnArch) -> Result<Self, TensorError> {
        arch.validate()?;
        let tensors = arch.layout().into_iter().map(|(_, s)| Tensor::zeros(&s)).collect();
        Ok(Self { arch, tensors })
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

/// Representation and logits handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MpnnOutput {
    pub representation: Var,
    pub logits: Var,
}

/// Neighbor weights for one forward pass, derived once from an optional
/// differentiable edge mask.
pub(crate) enum Propagation {
    Plain,
    Masked {
        /// Mask value of every stored (directed) entry, `nnz × 1`.
        entry_mask: Var,
        /// Symmetric-normalized masked values and self-loop weights.
        gcn: Option<(Var, Var)>,
        /// Masked row-normalized values.
        mean: Option<Var>,
    },
}

/// `D_m`-normalized values of the masked adjacency for GCN layers: entry
/// `m_ij s_i s_j` and self weight `s_i²` with `s = 1/√(d_m + 1)`.
pub fn masked_gcn_values(tape: &mut Tape, ctx: &GraphContext, entry_mask: Var) -> Result<(Var, Var), TensorError> {
    let idx = &ctx.index;
    let deg = tape.scatter_add_rows(entry_mask, idx.entry_row(), ctx.num_nodes)?;
    let d1 = tape.add_scalar(deg, 1.0)?;
    let s = tape.rsqrt(d1)?;
    let s_row = tape.gather_rows(s, idx.entry_row())?;
    let s_col = tape.gather_rows(s, idx.entry_col())?;
    let v = tape.hadamard(entry_mask, s_row)?;
    let vals = tape.hadamard(v, s_col)?;
    let self_w = tape.hadamard(s, s)?;
    Ok((vals, self_w))
}

fn masked_mean_values(tape: &mut Tape, ctx: &GraphContext, entry_mask: Var) -> Result<Var, TensorError> {
    let idx = &ctx.index;
    let deg = tape.scatter_add_rows(entry_mask, idx.entry_row(), ctx.num_nodes)?;
    let deg_row = tape.gather_rows(deg, idx.entry_row())?;
    let r = tape.rsqrt(deg_row)?;
    let r2 = tape.hadamard(r, r)?;
    tape.hadamard(entry_mask, r2)
}

impl Propagation {
    pub(crate) fn new(
        tape: &mut Tape,
        ctx: &GraphContext,
        aggregation: Aggregation,
        edge_mask: Option<Var>,
    ) -> Result<Self, TensorError> {
        let Some(mask) = edge_mask else { return Ok(Propagation::Plain) };
        let entry_mask = tape.gather_rows(mask, ctx.index.entry_edge())?;
        let gcn = match aggregation {
            Aggregation::Gcn => Some(masked_gcn_values(tape, ctx, entry_mask)?),
            _ => None,
        };
        let mean = match aggregation {
            Aggregation::Mean => Some(masked_mean_values(tape, ctx, entry_mask)?),
            _ => None,
        };
        Ok(Propagation::Masked { entry_mask, gcn, mean })
    }
}

/// Splits `x` into the per-tower column blocks as tape constants.
fn tower_inputs(tape: &mut Tape, arch: &MpnnArch, x: &Tensor) -> Result<Vec<Var>, TensorError> {
    if arch.towers == 1 {
        return Ok(vec![tape.constant(x.clone())]);
    }
    let w = arch.tower_in();
    (0..arch.towers).map(|t| Ok(tape.constant(x.slice_cols(t * w, (t + 1) * w)?))).collect()
}

/// Handles of one layer, in layout order.
struct LayerVars {
    weight: Var,
    bias: Option<Var>,
    self_weight: Option<Var>,
    att: Option<(Var, Var)>,
}

impl LayerVars {
    fn split(arch: &MpnnArch, p: &[Var]) -> Self {
        let mut it = p.iter().copied();
        let weight = it.next().expect("layer weight");
        let bias = if arch.bias { it.next() } else { None };
        let self_weight = if arch.aggregation != Aggregation::Gcn { it.next() } else { None };
        let att = if arch.aggregation == Aggregation::Attention {
            Some((it.next().expect("att_src"), it.next().expect("att_dst")))
        } else {
            None
        };
        Self { weight, bias, self_weight, att }
    }
}

fn layer_forward(
    tape: &mut Tape,
    ctx: &GraphContext,
    agg: Aggregation,
    prop: &Propagation,
    h: Var,
    p: &LayerVars,
) -> Result<Var, TensorError> {
    let z = tape.matmul(h, p.weight)?;
    let msg = match (agg, prop) {
        (Aggregation::Gcn, Propagation::Plain) => tape.sparse_dense_matmul(&ctx.tilde_a, z)?,
        (Aggregation::Gcn, Propagation::Masked { gcn: Some((vals, self_w)), .. }) => {
            let nb = tape.sparse_values_matmul(ctx.index.pattern(), *vals, z)?;
            let sl = tape.row_scale(*self_w, z)?;
            tape.add(nb, sl)?
        }
        (Aggregation::Mean, Propagation::Plain) => tape.sparse_dense_matmul(&ctx.row_norm_a, z)?,
        (Aggregation::Mean, Propagation::Masked { mean: Some(vals), .. }) => {
            tape.sparse_values_matmul(ctx.index.pattern(), *vals, z)?
        }
        (Aggregation::Attention, _) => {
            let idx = &ctx.index;
            let (att_src, att_dst) = p.att.expect("attention layer");
            let src = tape.matmul(z, att_src)?;
            let dst = tape.matmul(z, att_dst)?;
            let es = tape.gather_rows(src, idx.entry_row())?;
            let ed = tape.gather_rows(dst, idx.entry_col())?;
            let e = tape.add(es, ed)?;
            let e = tape.leaky_relu(e, LEAKY_SLOPE)?;
            let mut alpha = tape.segment_softmax(e, idx.pattern())?;
            if let Propagation::Masked { entry_mask, .. } = prop {
                alpha = tape.hadamard(alpha, *entry_mask)?;
            }
            tape.sparse_values_matmul(idx.pattern(), alpha, z)?
        }
        _ => unreachable!("propagation built for a different aggregation"),
    };
    let msg = match p.self_weight {
        Some(w) => {
            let zs = tape.matmul(h, w)?;
            tape.add(msg, zs)?
        }
        None => msg,
    };
    match p.bias {
        Some(b) => tape.add_row_broadcast(msg, b),
        None => Ok(msg),
    }
}

/// Forward pass. `edge_mask` holds one weight per undirected edge
/// (`E × 1`) or is `None` for the unmasked graph.
pub fn mpnn_forward(
    tape: &mut Tape,
    params: &MpnnParams,
    vars: &[Var],
    ctx: &GraphContext,
    x: &Tensor,
    edge_mask: Option<Var>,
) -> Result<MpnnOutput, TensorError> {
    let arch = &params.arch;
    if vars.len() != params.tensors.len() {
        return Err(TensorError::Invalid("parameter handle count".into()));
    }
    if x.cols() != arch.input_dim || x.rows() != ctx.num_nodes {
        return Err(TensorError::Shape(format!("features {:?} vs arch input {}", x.shape(), arch.input_dim)));
    }
    let prop = Propagation::new(tape, ctx, arch.aggregation, edge_mask)?;
    let per = arch.per_layer();
    let mut outputs = Vec::with_capacity(arch.towers);
    for (t, input) in tower_inputs(tape, arch, x)?.into_iter().enumerate() {
        let mut h = input;
        for l in 0..arch.layers {
            let base = (t * arch.layers + l) * per;
            let layer = LayerVars::split(arch, &vars[base..base + per]);
            h = layer_forward(tape, ctx, arch.aggregation, &prop, h, &layer)?;
            if l + 1 < arch.layers {
                h = tape.relu(h)?;
            }
        }
        outputs.push(h);
    }
    let representation = match outputs.as_slice() {
        [one] => *one,
        [a, b] => tape.concat_cols(*a, *b)?,
        _ => unreachable!("validated tower count"),
    };
    let logits = match arch.head {
        Head::Linear => {
            let n = vars.len();
            let z = tape.matmul(representation, vars[n - 2])?;
            tape.add_row_broadcast(z, vars[n - 1])?
        }
        Head::TowerSum => tape.add(outputs[0], outputs[1])?,
    };
    Ok(MpnnOutput { representation, logits })
}

/// Convenience for evaluation outside training: fresh tape, plain values.
pub fn mpnn_predict(
    params: &MpnnParams,
    ctx: &GraphContext,
    x: &Tensor,
    edge_mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor), TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let mask = edge_mask.map(|m| tape.constant(m.clone()));
    let out = mpnn_forward(&mut tape, params, &vars, ctx, x, mask)?;
    Ok((tape.value(out.representation).clone(), tape.value(out.logits).clone()))
}

