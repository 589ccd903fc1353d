use crate::config::KvConfig;
use crate::error::ConfigError;
use crate::graph::{Dataset, Graph};
use crate::rng::stream;
use crate::tensor::Tensor;

use super::{assign_splits, multi_env_topology, normal, ShiftKind};

/// Environment id of the held-out environment; 0 and 1 are training.
pub const TOY_TEST_ENV: i64 = 2;

const INVARIANT_MEANS: [[f64; 2]; 4] = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];

const CONCEPT_MEANS: [[[f64; 2]; 4]; 3] = [
    [[3.0, 3.0], [-3.0, 3.0], [-3.0, -3.0], [3.0, -3.0]],
    [[-3.0, 3.0], [-3.0, -3.0], [3.0, -3.0], [3.0, 3.0]],
    [[-3.0, -3.0], [3.0, -3.0], [3.0, 3.0], [-3.0, 3.0]],
];

const COVARIATE_MEANS: [[f64; 2]; 3] = [[2.0, 2.0], [4.0, 4.0], [6.0, 6.0]];

pub fn toy_invariant_mean(class: usize) -> [f64; 2] {
    INVARIANT_MEANS[class]
}

pub fn toy_spurious_mean(shift: ShiftKind, env: usize, class: usize) -> [f64; 2] {
    match shift {
        ShiftKind::Concept => CONCEPT_MEANS[env][class],
        ShiftKind::Covariate => COVARIATE_MEANS[env],
    }
}

/// Four classes, four features (two invariant, two spurious), three
/// environments laid out one after the other.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ToyConfig {
    pub nodes_per_class_per_env: usize,
    pub shift: ShiftKind,
    pub edge_probability: f64,
    pub cross_env_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            nodes_per_class_per_env: 100,
            shift: ShiftKind::Concept,
            // Sparse enough that aggregation does not wash out the
            // invariant features (mean degree about 2).
            edge_probability: 0.005,
            cross_env_fraction: 0.05,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let shift = match kv.get::<String>("shift")? {
            Some(s) => s.parse().map_err(|msg| ConfigError::Value { key: "shift".into(), msg })?,
            None => d.shift,
        };
        let cfg = Self {
            nodes_per_class_per_env: kv.get_or("nodes_per_class_per_env", d.nodes_per_class_per_env)?,
            shift,
            edge_probability: kv.get_or("edge_probability", d.edge_probability)?,
            cross_env_fraction: kv.get_or("cross_env_fraction", d.cross_env_fraction)?,
            val_fraction: kv.get_or("val_fraction", d.val_fraction)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        if cfg.nodes_per_class_per_env == 0 {
            return Err(ConfigError::Value { key: "nodes_per_class_per_env".into(), msg: "must be positive".into() });
        }
        if !(0.0..1.0).contains(&cfg.edge_probability) || !(0.0..1.0).contains(&cfg.cross_env_fraction) {
            return Err(ConfigError::Value { key: "edge_probability".into(), msg: "probabilities must lie in [0, 1)".into() });
        }
        Ok(cfg)
    }
}

pub fn gen_toy(config: &ToyConfig) -> Dataset {
    let npc = config.nodes_per_class_per_env;
    let per_env = 4 * npc;
    let n = 3 * per_env;
    let mut topo_rng = stream(config.seed, "toy/topology");
    let (edges, _) =
        multi_env_topology(&[per_env; 3], config.edge_probability, config.cross_env_fraction, &mut topo_rng);

    let mut rng = stream(config.seed, "toy/features");
    let mut features = Vec::with_capacity(n * 4);
    let mut labels = Vec::with_capacity(n);
    let mut envs = Vec::with_capacity(n);
    for env in 0..3 {
        for class in 0..4 {
            let inv = INVARIANT_MEANS[class];
            let sp = toy_spurious_mean(config.shift, env, class);
            for _ in 0..npc {
                features.extend(inv.iter().chain(&sp).map(|m| m + normal(&mut rng)));
                labels.push(class);
                envs.push(env as i64);
            }
        }
    }
    let split = assign_splits(&envs, |e| e == TOY_TEST_ENV, config.val_fraction, &mut stream(config.seed, "toy/splits"));
    let graph = Graph::new(n, 4, edges, Tensor::matrix(n, 4, features).expect("n×4"), labels, envs, split)
        .expect("generated graph is valid");
    Dataset::new(graph)
}
