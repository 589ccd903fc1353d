//! Node-level out-of-distribution laboratory: synthetic graph generators,
//! small GNNs trained under ERM, IRMv1, VREx, CIA and CIA-LRA, numeric
//! checks of which objectives recover invariant parameters, and the
//! subgroup generalization bound terms.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod theory;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;
