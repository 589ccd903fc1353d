//! The scalar-parameter linear GNN used by the theory checks.
//!
//! Each lower layer mixes neighbors and the center node of the two feature
//! branches separately: branch `i` at layer `l` applies
//! `θᵢ¹⁽ˡ⁾ · (Ã − I) + θᵢ²⁽ˡ⁾ · I`, so `(1, 1)` aggregates with `Ã` and
//! `(0, 1)` is the identity. Layers are applied in order `1, …, L−1` and
//! the output is `H₁θ₁ + H₂θ₂`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::TensorError;
use crate::graph::CsrMatrix;
use crate::tensor::Tensor;

/// Mixing scalars of one lower layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScalars {
    /// Neighbor weight of the invariant branch.
    pub inv_neighbor: f64,
    /// Center weight of the invariant branch.
    pub inv_self: f64,
    /// Neighbor weight of the spurious branch.
    pub sp_neighbor: f64,
    /// Center weight of the spurious branch.
    pub sp_self: f64,
}

impl LayerScalars {
    pub const AGGREGATE: Self = Self { inv_neighbor: 1.0, inv_self: 1.0, sp_neighbor: 1.0, sp_self: 1.0 };

    fn to_array(self) -> [f64; 4] {
        [self.inv_neighbor, self.inv_self, self.sp_neighbor, self.sp_self]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self { inv_neighbor: a[0], inv_self: a[1], sp_neighbor: a[2], sp_self: a[3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryGnnParams {
    pub theta1: f64,
    pub theta2: f64,
    /// Layers `1..L`, applied bottom to top.
    pub layers: Vec<LayerScalars>,
}

impl TheoryGnnParams {
    /// Every mixing scalar equal to 1, which reduces each layer to `Ã`.
    pub fn gcn(depth: usize, theta1: f64, theta2: f64) -> Self {
        assert!(depth >= 1, "depth must be at least 1");
        Self { theta1, theta2, layers: vec![LayerScalars::AGGREGATE; depth - 1] }
    }

    pub fn depth(&self) -> usize {
        self.layers.len() + 1
    }

    /// Invariant optimum: the top `k` layers aggregate the invariant branch,
    /// the rest pass it through, the spurious branch is switched off and
    /// `θ₁ = 1, θ₂ = 0`. Requires `1 ≤ k < depth`.
    pub fn invariant_optimum(depth: usize, k: usize) -> Self {
        assert!(k >= 1 && k < depth, "need 1 ≤ k < depth");
        let layers = (1..depth)
            .map(|l| {
                let agg = l > depth - 1 - k;
                LayerScalars { inv_neighbor: f64::from(u8::from(agg)), inv_self: 1.0, sp_neighbor: 0.0, sp_self: 0.0 }
            })
            .collect();
        Self { theta1: 1.0, theta2: 0.0, layers }
    }

    /// Special solution whose top `s` layers aggregate the invariant branch
    /// while the spurious branch is passed through unchanged, so that
    /// `H₁ = Ã^s X₁` and `H₂ = X₂`. Requires `s < depth`.
    pub fn spurious_passthrough(depth: usize, s: usize, theta1: f64, theta2: f64) -> Self {
        assert!(s < depth, "need s < depth");
        let layers = (1..depth)
            .map(|l| {
                let agg = l > depth - 1 - s;
                LayerScalars { inv_neighbor: f64::from(u8::from(agg)), inv_self: 1.0, sp_neighbor: 0.0, sp_self: 1.0 }
            })
            .collect();
        Self { theta1, theta2, layers }
    }

    /// Flat order: `θ₁, θ₂`, then four scalars per layer.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.theta1, self.theta2];
        v.extend(self.layers.iter().flat_map(|l| l.to_array()));
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= 2 && (v.len() - 2) % 4 == 0, "bad parameter vector length");
        let layers = v[2..].chunks(4).map(|c| LayerScalars::from_array([c[0], c[1], c[2], c[3]])).collect();
        Self { theta1: v[0], theta2: v[1], layers }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }
}

/// Branch representations and prediction of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryOutput {
    pub h1: Tensor,
    pub h2: Tensor,
    pub prediction: Tensor,
}

fn mix(tilde_a: &CsrMatrix, h: &Tensor, neighbor: f64, center: f64) -> Tensor {
    if neighbor == 0.0 {
        return h.map(|v| center * v);
    }
    let ah = tilde_a.matmul_dense(h).expect("square adjacency");
    // Same operator as `neighbor·(Ã − I) + center·I`, arranged so that the
    // pure aggregation `(1, 1)` is exactly `Ã`.
    let data = ah.data().iter().zip(h.data()).map(|(a, x)| neighbor * a + (center - neighbor) * x).collect();
    Tensor::new(h.shape().to_vec(), data).expect("same shape")
}

/// Forward pass on plain tensors; `x1`, `x2` are `N × S` (one column per
/// sample).
pub fn theory_gnn_forward(params: &TheoryGnnParams, tilde_a: &CsrMatrix, x1: &Tensor, x2: &Tensor) -> TheoryOutput {
    let mut h1 = x1.clone();
    let mut h2 = x2.clone();
    for l in &params.layers {
        h1 = mix(tilde_a, &h1, l.inv_neighbor, l.inv_self);
        h2 = mix(tilde_a, &h2, l.sp_neighbor, l.sp_self);
    }
    let data = h1.data().iter().zip(h2.data()).map(|(a, b)| params.theta1 * a + params.theta2 * b).collect();
    let prediction = Tensor::new(h1.shape().to_vec(), data).expect("same shape");
    TheoryOutput { h1, h2, prediction }
}

/// Tape handles for every scalar of [`TheoryGnnParams`], in flat order.
#[derive(Debug, Clone)]
pub struct TheoryVars {
    pub scalars: Vec<Var>,
}

impl TheoryVars {
    pub fn register(tape: &mut Tape, params: &TheoryGnnParams) -> Self {
        Self { scalars: params.to_vec().into_iter().map(|v| tape.param(Tensor::scalar(v))).collect() }
    }

    pub fn theta1(&self) -> Var {
        self.scalars[0]
    }

    pub fn theta2(&self) -> Var {
        self.scalars[1]
    }

    pub fn layer(&self, l: usize) -> [Var; 4] {
        let b = 2 + 4 * l;
        [self.scalars[b], self.scalars[b + 1], self.scalars[b + 2], self.scalars[b + 3]]
    }

    pub fn num_layers(&self) -> usize {
        (self.scalars.len() - 2) / 4
    }
}

/// Differentiable branch outputs `(h1, h2, prediction)`.
pub fn theory_gnn_tape(
    tape: &mut Tape,
    vars: &TheoryVars,
    tilde_a: &std::sync::Arc<CsrMatrix>,
    x1: Var,
    x2: Var,
) -> Result<(Var, Var, Var), TensorError> {
    let tape_mix = |tape: &mut Tape, h: Var, neighbor: Var, center: Var| -> Result<Var, TensorError> {
        let ah = tape.sparse_dense_matmul(tilde_a, h)?;
        let a = tape.scalar_mul(neighbor, ah)?;
        let self_weight = tape.sub(center, neighbor)?;
        let b = tape.scalar_mul(self_weight, h)?;
        tape.add(a, b)
    };
    let (mut h1, mut h2) = (x1, x2);
    for l in 0..vars.num_layers() {
        let [n1, c1, n2, c2] = vars.layer(l);
        h1 = tape_mix(tape, h1, n1, c1)?;
        h2 = tape_mix(tape, h2, n2, c2)?;
    }
    let a = tape.scalar_mul(vars.theta1(), h1)?;
    let b = tape.scalar_mul(vars.theta2(), h2)?;
    let pred = tape.add(a, b)?;
    Ok((h1, h2, pred))
}
