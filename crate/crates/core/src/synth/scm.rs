use crate::config::KvConfig;
use crate::error::ConfigError;
use crate::graph::{build_normalized, CsrMatrix, Dataset, Graph, Split};
use crate::rng::stream;
use crate::tensor::Tensor;

use super::{assign_splits, multi_env_topology, normal, ShiftKind};

/// Regression SCM: `Y = Ã^k X₁ + n₁`, and `X₂ = Ã^m Y + n₂ + ε` under
/// concept shift or `X₂ = n₂ + ε` under covariate shift, with `ε ~
/// N(μᵉ, within_std²)` per environment.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ScmConfig {
    pub num_envs: usize,
    pub nodes_per_env: usize,
    pub causal_depth: usize,
    pub spurious_depth: usize,
    pub shift: ShiftKind,
    /// One mean per environment; empty means draw each from `N(0, σ²)`.
    pub env_spurious_means: Vec<f64>,
    pub cross_env_variance: f64,
    pub edge_probability: f64,
    pub within_std: f64,
    pub cross_env_fraction: f64,
    /// Standard deviation of `n₁` and `n₂`.
    pub noise_std: f64,
    /// Fixes every `X₁` entry to this value instead of drawing `N(0, 1)`.
    pub x1_constant: Option<f64>,
    /// Number of quantile bins used to derive class labels from `Y`.
    pub num_classes: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            num_envs: 3,
            nodes_per_env: 200,
            causal_depth: 1,
            spurious_depth: 1,
            shift: ShiftKind::Concept,
            env_spurious_means: Vec::new(),
            cross_env_variance: 1.0,
            edge_probability: 0.02,
            within_std: 0.5,
            cross_env_fraction: 0.05,
            noise_std: 1.0,
            x1_constant: None,
            num_classes: 2,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ScmConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let shift = match kv.get::<String>("shift")? {
            Some(s) => s.parse().map_err(|msg| ConfigError::Value { key: "shift".into(), msg })?,
            None => d.shift,
        };
        Ok(Self {
            num_envs: kv.get_or("num_envs", d.num_envs)?,
            nodes_per_env: kv.get_or("nodes_per_env", d.nodes_per_env)?,
            causal_depth: kv.get_or("causal_depth", d.causal_depth)?,
            spurious_depth: kv.get_or("spurious_depth", d.spurious_depth)?,
            shift,
            env_spurious_means: kv.get_list("env_spurious_means")?.unwrap_or_default(),
            cross_env_variance: kv.get_or("cross_env_variance", d.cross_env_variance)?,
            edge_probability: kv.get_or("edge_probability", d.edge_probability)?,
            within_std: kv.get_or("within_std", d.within_std)?,
            cross_env_fraction: kv.get_or("cross_env_fraction", d.cross_env_fraction)?,
            noise_std: kv.get_or("noise_std", d.noise_std)?,
            x1_constant: kv.get("x1_constant")?,
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            val_fraction: kv.get_or("val_fraction", d.val_fraction)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: &str| Err(ConfigError::Value { key: key.into(), msg: msg.into() });
        if self.nodes_per_env < 2 {
            return bad("nodes_per_env", "need at least 2 nodes per environment");
        }
        if self.num_envs == 0 {
            return bad("num_envs", "need at least one environment");
        }
        if self.causal_depth < 1 {
            return bad("causal_depth", "must be at least 1");
        }
        if self.shift == ShiftKind::Concept && self.spurious_depth < 1 {
            return bad("spurious_depth", "must be at least 1 under concept shift");
        }
        if self.cross_env_variance.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("cross_env_variance", "must be positive");
        }
        if !(self.edge_probability > 0.0 && self.edge_probability < 1.0) {
            return bad("edge_probability", "must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.cross_env_fraction) {
            return bad("cross_env_fraction", "must lie in [0, 1)");
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be at least 1");
        }
        if !self.env_spurious_means.is_empty() {
            if self.env_spurious_means.len() != self.num_envs {
                return bad("env_spurious_means", "need one mean per environment");
            }
            let mean = self.env_spurious_means.iter().sum::<f64>() / self.num_envs as f64;
            let tol = 3.0 * (self.cross_env_variance / self.num_envs as f64).sqrt();
            if mean.abs() > tol {
                return bad("env_spurious_means", "cross-environment mean must be close to 0");
            }
        }
        Ok(())
    }
}

/// `Ã^power · x` by repeated sparse products.
pub(crate) fn propagate(tilde_a: &CsrMatrix, x: &Tensor, power: usize) -> Tensor {
    (0..power).fold(x.clone(), |acc, _| tilde_a.matmul_dense(&acc).expect("square"))
}

/// `Y = Ã^k X₁ + n₁` for a single environment.
pub fn scm_env_targets(tilde_a: &CsrMatrix, x1: &Tensor, k: usize, n1: &[f64]) -> Vec<f64> {
    propagate(tilde_a, x1, k).data().iter().zip(n1).map(|(a, b)| a + b).collect()
}

pub(crate) fn local_graph(n: usize, edges: Vec<(usize, usize)>) -> Graph {
    Graph::new(n, 1, edges, Tensor::zeros(&[n, 1]), vec![0; n], vec![0; n], vec![Split::Train; n])
        .expect("generated local graph is valid")
}

/// Two features `[x¹, x²]`, labels from quantile bins of `Y`, the last
/// environment held out as test (when there is more than one).
pub fn gen_scm(config: &ScmConfig) -> Result<Dataset, ConfigError> {
    config.validate()?;
    let n_env = config.nodes_per_env;
    let sizes = vec![n_env; config.num_envs];
    let mut topo_rng = stream(config.seed, "scm/topology");
    let (edges, local) =
        multi_env_topology(&sizes, config.edge_probability, config.cross_env_fraction, &mut topo_rng);

    let means = if config.env_spurious_means.is_empty() {
        let mut rng = stream(config.seed, "scm/env-means");
        let sd = config.cross_env_variance.sqrt();
        (0..config.num_envs).map(|_| sd * normal(&mut rng)).collect()
    } else {
        config.env_spurious_means.clone()
    };

    let mut feat_rng = stream(config.seed, "scm/features");
    let mut features = Vec::with_capacity(2 * n_env * config.num_envs);
    let mut targets = Vec::with_capacity(n_env * config.num_envs);
    let mut envs = Vec::with_capacity(n_env * config.num_envs);
    for (e, block) in local.into_iter().enumerate() {
        let tilde = build_normalized(&local_graph(n_env, block)).tilde_a;
        let x1: Vec<f64> =
            (0..n_env).map(|_| config.x1_constant.unwrap_or_else(|| normal(&mut feat_rng))).collect();
        let n1: Vec<f64> = (0..n_env).map(|_| config.noise_std * normal(&mut feat_rng)).collect();
        let y = scm_env_targets(&tilde, &Tensor::matrix(n_env, 1, x1.clone()).expect("n×1"), config.causal_depth, &n1);
        let base = match config.shift {
            ShiftKind::Concept => {
                propagate(&tilde, &Tensor::matrix(n_env, 1, y.clone()).expect("n×1"), config.spurious_depth).into_data()
            }
            ShiftKind::Covariate => vec![0.0; n_env],
        };
        for i in 0..n_env {
            let n2 = config.noise_std * normal(&mut feat_rng);
            let eps = means[e] + config.within_std * normal(&mut feat_rng);
            features.push(x1[i]);
            features.push(base[i] + n2 + eps);
        }
        targets.extend(y);
        envs.extend(std::iter::repeat_n(e as i64, n_env));
    }

    let labels = quantile_bins(&targets, config.num_classes);
    let test_env = if config.num_envs > 1 { config.num_envs as i64 - 1 } else { -2 };
    let mut split_rng = stream(config.seed, "scm/splits");
    let split = assign_splits(&envs, |e| e == test_env, config.val_fraction, &mut split_rng);
    let n = n_env * config.num_envs;
    let graph = Graph::new(
        n,
        config.num_classes,
        edges,
        Tensor::matrix(n, 2, features).expect("n×2"),
        labels,
        envs,
        split,
    )
    .expect("generated graph is valid");
    Ok(Dataset { graph, targets: Some(targets) })
}

/// Class index = number of empirical quantile cut points strictly below `y`.
fn quantile_bins(values: &[f64], classes: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..classes).map(|q| sorted[q * sorted.len() / classes]).collect();
    values.iter().map(|v| cuts.iter().filter(|&&c| c <= *v).count().min(classes - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_nodes(ds: &Dataset, e: i64) -> Vec<usize> {
        ds.graph.envs().iter().enumerate().filter(|&(_, &x)| x == e).map(|(i, _)| i).collect()
    }

    #[test]
    fn noiseless_one_hop_target_is_row_sum() {
        let g = local_graph(4, vec![(0, 1), (1, 2), (1, 3)]);
        let tilde = build_normalized(&g).tilde_a;
        let y = scm_env_targets(&tilde, &Tensor::filled(&[4, 1], 1.0), 1, &[0.0; 4]);
        assert_eq!(y, tilde.row_sums());

        let cfg = ScmConfig { x1_constant: Some(1.0), noise_std: 0.0, cross_env_fraction: 0.0, ..Default::default() };
        let ds = gen_scm(&cfg).unwrap();
        let t = ds.targets.unwrap();
        assert!(t.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn concept_shift_env_offsets() {
        let cfg = ScmConfig {
            num_envs: 2,
            nodes_per_env: 2000,
            env_spurious_means: vec![2.0, -2.0],
            edge_probability: 0.003,
            cross_env_fraction: 0.0,
            ..Default::default()
        };
        let ds = gen_scm(&cfg).unwrap();
        let y = ds.targets.as_ref().unwrap();
        for (e, mu) in [(0, 2.0), (1, -2.0)] {
            let nodes = env_nodes(&ds, e);
            let off = nodes[0];
            let local: Vec<(usize, usize)> = ds
                .graph
                .edges()
                .iter()
                .filter(|&&(u, v)| nodes.contains(&u) && nodes.contains(&v))
                .map(|&(u, v)| (u - off, v - off))
                .collect();
            let tilde = build_normalized(&local_graph(nodes.len(), local)).tilde_a;
            let ye = Tensor::matrix(nodes.len(), 1, nodes.iter().map(|&i| y[i]).collect()).unwrap();
            let prop = propagate(&tilde, &ye, 1);
            let resid: Vec<f64> =
                nodes.iter().enumerate().map(|(k, &i)| ds.graph.features().get(i, 1) - prop.data()[k]).collect();
            let mean = resid.iter().sum::<f64>() / resid.len() as f64;
            let sd = (1.0f64 + 0.25).sqrt();
            assert!((mean - mu).abs() < 3.0 * sd / (nodes.len() as f64).sqrt(), "env {e}: {mean}");
        }
    }

    #[test]
    fn covariate_shift_has_no_within_env_covariance() {
        let cfg = ScmConfig { shift: ShiftKind::Covariate, nodes_per_env: 3000, edge_probability: 0.002, ..Default::default() };
        let ds = gen_scm(&cfg).unwrap();
        let y = ds.targets.as_ref().unwrap();
        for e in 0..3 {
            let nodes = env_nodes(&ds, e);
            let n = nodes.len() as f64;
            let xs: Vec<f64> = nodes.iter().map(|&i| ds.graph.features().get(i, 1)).collect();
            let ys: Vec<f64> = nodes.iter().map(|&i| y[i]).collect();
            let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
            let cov = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
            let sx = (xs.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
            let sy = (ys.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
            assert!(cov.abs() < 3.0 * sx * sy / n.sqrt(), "env {e}: cov {cov}");
        }
    }

    #[test]
    fn concept_shift_correlates_within_env() {
        let cfg = ScmConfig { nodes_per_env: 1000, edge_probability: 0.004, ..Default::default() };
        let ds = gen_scm(&cfg).unwrap();
        let y = ds.targets.as_ref().unwrap();
        let nodes = env_nodes(&ds, 0);
        let n = nodes.len() as f64;
        let xs: Vec<f64> = nodes.iter().map(|&i| ds.graph.features().get(i, 1)).collect();
        let ys: Vec<f64> = nodes.iter().map(|&i| y[i]).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let sx = (xs.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (ys.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
        assert!(cov / (sx * sy) > 4.0 / n.sqrt());
    }

    #[test]
    fn rejects_tiny_envs_and_is_deterministic() {
        assert!(gen_scm(&ScmConfig { nodes_per_env: 1, ..Default::default() }).is_err());
        let cfg = ScmConfig { seed: 9, ..Default::default() };
        assert_eq!(gen_scm(&cfg).unwrap(), gen_scm(&cfg).unwrap());
        let envs: std::collections::BTreeSet<i64> = gen_scm(&cfg).unwrap().graph.envs().iter().copied().collect();
        assert_eq!(envs.len(), 3);
    }
}
