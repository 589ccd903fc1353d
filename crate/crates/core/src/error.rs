use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("edge endpoint {node} out of range for {num_nodes} nodes")]
    EndpointOutOfRange { node: usize, num_nodes: usize },
    #[error("label {label} of node {node} is not below num_classes = {num_classes}")]
    LabelOutOfRange { node: usize, label: usize, num_classes: usize },
    #[error("{what} has length {got}, expected {expected}")]
    Length { what: &'static str, got: usize, expected: usize },
    #[error("class mismatch: nodes {i} and {j} are not both of class {class}")]
    ClassMismatch { i: usize, j: usize, class: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("invalid meta.json: {0}")]
    Meta(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("missing config key: {0}")]
    Missing(String),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("class means are not orthonormal: max |dot - delta| = {max_dot:.6e}")]
    NotOrthonormal { max_dot: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("empty mask: no nodes selected")]
    EmptyMask,
    #[error("variance penalty needs at least 2 environments, got {0}")]
    TooFewEnvironments(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Objective(ObjectiveError::Graph(e))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("training diverged at step {step}; last finite loss {last_loss}")]
    Diverged { step: usize, last_loss: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty mask: no nodes selected")]
    EmptyMask,
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("σ² must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
