use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::config::KvConfig;
use crate::error::ConfigError;
use crate::graph::{Dataset, Graph};
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;

use super::{assign_splits, normal};

/// CSBM with an invariant feature half drawn around class means and a
/// spurious half drawn around per-environment class means.
///
/// `heterophily[c][c']` is the distribution of a heterophilic neighbor's
/// class for a class-`c` node (row sums to 1 over `c' ≠ c`); the absolute
/// ratio is `(1 − homophily) · heterophily[c][c']`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CsbmConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_envs: usize,
    /// `C` vectors of length `D/2`; `None` draws a seeded orthonormal set.
    pub class_means: Option<Vec<Vec<f64>>>,
    /// Per environment, `C` vectors of length `D/2`.
    pub env_means: Option<Vec<Vec<Vec<f64>>>>,
    pub noise_variance: f64,
    /// One homophily ratio shared by all environments, or one per environment.
    pub homophily: Vec<f64>,
    pub heterophily: Option<Vec<Vec<f64>>>,
    pub nodes_per_class: usize,
    pub mean_degree: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for CsbmConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            feature_dim: 8,
            num_envs: 2,
            class_means: None,
            env_means: None,
            noise_variance: 0.1,
            homophily: vec![0.7],
            heterophily: None,
            nodes_per_class: 50,
            mean_degree: 10.0,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Generated graph together with the means it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct CsbmSample {
    pub dataset: Dataset,
    pub class_means: Vec<Vec<f64>>,
    pub env_means: Vec<Vec<Vec<f64>>>,
}

impl CsbmConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let num_envs = kv.get_or("num_envs", d.num_envs)?;
        let mut env_means = Vec::new();
        for e in 0..num_envs {
            if let Some(m) = kv.get_matrix(&format!("env_means_{e}"))? {
                env_means.push(m);
            }
        }
        if !env_means.is_empty() && env_means.len() != num_envs {
            return Err(ConfigError::Value {
                key: "env_means_*".into(),
                msg: format!("need one matrix per environment, got {}", env_means.len()),
            });
        }
        Ok(Self {
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            feature_dim: kv.get_or("feature_dim", d.feature_dim)?,
            num_envs,
            class_means: kv.get_matrix("class_means")?,
            env_means: (!env_means.is_empty()).then_some(env_means),
            noise_variance: kv.get_or("noise_variance", d.noise_variance)?,
            homophily: kv.get_list("homophily")?.unwrap_or(d.homophily),
            heterophily: kv.get_matrix("heterophily")?,
            nodes_per_class: kv.get_or("nodes_per_class", d.nodes_per_class)?,
            mean_degree: kv.get_or("mean_degree", d.mean_degree)?,
            val_fraction: kv.get_or("val_fraction", d.val_fraction)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }

    fn homophily_of(&self, env: usize) -> f64 {
        if self.homophily.len() == 1 { self.homophily[0] } else { self.homophily[env] }
    }

    fn heterophily_row(&self, c: usize) -> Vec<f64> {
        match &self.heterophily {
            Some(t) => t[c].clone(),
            None => {
                let share = 1.0 / (self.num_classes - 1) as f64;
                (0..self.num_classes).map(|k| if k == c { 0.0 } else { share }).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: String| Err(ConfigError::Value { key: key.into(), msg });
        let c = self.num_classes;
        if c < 2 {
            return bad("num_classes", "need at least 2 classes".into());
        }
        if self.feature_dim % 2 != 0 || self.feature_dim / 2 < c {
            return bad("feature_dim", format!("must be even with feature_dim/2 ≥ num_classes ({c})"));
        }
        if self.num_envs == 0 {
            return bad("num_envs", "need at least one environment".into());
        }
        if self.noise_variance < 0.0 {
            return bad("noise_variance", "must be non-negative".into());
        }
        if self.homophily.len() != 1 && self.homophily.len() != self.num_envs {
            return bad("homophily", "give one value or one per environment".into());
        }
        if self.homophily.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return bad("homophily", "ratios must lie in [0, 1]".into());
        }
        if let Some(t) = &self.heterophily {
            if t.len() != c || t.iter().any(|r| r.len() != c) {
                return bad("heterophily", format!("expected a {c}×{c} table"));
            }
            for (k, row) in t.iter().enumerate() {
                let s: f64 = row.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, v)| v).sum();
                if row[k] != 0.0 || row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return bad("heterophily", format!("row {k} must be a distribution over other classes"));
                }
            }
        }
        if self.nodes_per_class == 0 {
            return bad("nodes_per_class", "must be positive".into());
        }
        let half = self.feature_dim / 2;
        if let Some(m) = &self.class_means {
            check_orthonormal(m, c, half, "class_means")?;
        }
        if let Some(ms) = &self.env_means {
            if ms.len() != self.num_envs {
                return bad("env_means", "need one set per environment".into());
            }
            for m in ms {
                check_orthonormal(m, c, half, "env_means")?;
            }
        }
        Ok(())
    }
}

fn check_orthonormal(vectors: &[Vec<f64>], count: usize, dim: usize, key: &str) -> Result<(), ConfigError> {
    if vectors.len() != count || vectors.iter().any(|v| v.len() != dim) {
        return Err(ConfigError::Value { key: key.into(), msg: format!("expected {count} vectors of length {dim}") });
    }
    let mut worst = 0.0f64;
    for (a, va) in vectors.iter().enumerate() {
        for (b, vb) in vectors.iter().enumerate() {
            let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    if worst > 1e-8 {
        return Err(ConfigError::NotOrthonormal { max_dot: worst });
    }
    Ok(())
}

/// `count` orthonormal vectors of length `dim` from modified Gram–Schmidt
/// (thin QR) of a Gaussian matrix.
pub fn orthonormal_basis(count: usize, dim: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot fit {count} orthonormal vectors in dimension {dim}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(q) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn pick(weights: &[f64], rng: &mut StreamRng) -> usize {
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Nodes are laid out environment by environment, class by class. The last
/// environment is the test split when there is more than one.
pub fn gen_csbm(config: &CsbmConfig) -> Result<CsbmSample, ConfigError> {
    config.validate()?;
    let (c, half, npc) = (config.num_classes, config.feature_dim / 2, config.nodes_per_class);
    let class_means = match &config.class_means {
        Some(m) => m.clone(),
        None => orthonormal_basis(c, half, &mut stream(config.seed, "csbm/class-means")),
    };
    let env_means: Vec<Vec<Vec<f64>>> = match &config.env_means {
        Some(m) => m.clone(),
        None => (0..config.num_envs)
            .map(|e| orthonormal_basis(c, half, &mut stream(config.seed, &format!("csbm/env-means/{e}"))))
            .collect(),
    };

    let per_env = c * npc;
    let n = per_env * config.num_envs;
    let sd = config.noise_variance.sqrt();
    let mut feat_rng = stream(config.seed, "csbm/features");
    let mut features = Vec::with_capacity(n * config.feature_dim);
    let mut labels = Vec::with_capacity(n);
    let mut envs = Vec::with_capacity(n);
    for (e, env_mean) in env_means.iter().enumerate() {
        for class in 0..c {
            for _ in 0..npc {
                features.extend(class_means[class].iter().map(|m| m + sd * normal(&mut feat_rng)));
                features.extend(env_mean[class].iter().map(|m| m + sd * normal(&mut feat_rng)));
                labels.push(class);
                envs.push(e as i64);
            }
        }
    }

    let mut edge_rng = stream(config.seed, "csbm/edges");
    let proposals = Poisson::new(config.mean_degree / 2.0).ok();
    let mut edges = std::collections::BTreeSet::new();
    for e in 0..config.num_envs {
        let p_hm = config.homophily_of(e);
        let base = e * per_env;
        for class in 0..c {
            let mut weights: Vec<f64> = config.heterophily_row(class).iter().map(|w| (1.0 - p_hm) * w).collect();
            weights[class] = p_hm;
            for k in 0..npc {
                let i = base + class * npc + k;
                let count = proposals.as_ref().map_or(0, |p| p.sample(&mut edge_rng) as usize);
                for _ in 0..count {
                    let target_class = pick(&weights, &mut edge_rng);
                    let j = base + target_class * npc + edge_rng.random_range(0..npc);
                    if j != i {
                        edges.insert((i.min(j), i.max(j)));
                    }
                }
            }
        }
    }

    let test_env = if config.num_envs > 1 { config.num_envs as i64 - 1 } else { -2 };
    let split = assign_splits(&envs, |e| e == test_env, config.val_fraction, &mut stream(config.seed, "csbm/splits"));
    let graph = Graph::new(
        n,
        c,
        edges.into_iter().collect(),
        Tensor::matrix(n, config.feature_dim, features).expect("n×D"),
        labels,
        envs,
        split,
    )
    .expect("generated graph is valid");
    Ok(CsbmSample { dataset: Dataset::new(graph), class_means, env_means })
}
