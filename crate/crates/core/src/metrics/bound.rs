use serde::{Deserialize, Serialize};

use super::{epsilon_distance, l2};
use crate::error::MetricError;
use crate::graph::{EnvId, Graph};
use crate::synth::CsbmSample;
use crate::tensor::Tensor;

/// Aggregated features, labels and heterophilic ratios of one node group.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    /// One mean-aggregated feature row per node.
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// `ratios[i][c']`: share of node `i`'s neighbors with class `c' ≠ yᵢ`;
    /// the own-class column is 0.
    pub ratios: Tensor,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `nodes` of graph-wide aggregates.
    pub fn gather(aggregated: &Tensor, ratios: &Tensor, labels: &[usize], nodes: &[usize]) -> Self {
        let pick = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = nodes.iter().map(|&i| t.row(i).to_vec()).collect();
            if rows.is_empty() {
                Tensor::zeros(&[0, t.cols()])
            } else {
                Tensor::from_rows(&rows).expect("equal widths")
            }
        };
        Self { features: pick(aggregated), labels: nodes.iter().map(|&i| labels[i]).collect(), ratios: pick(ratios) }
    }
}

/// Inputs of the bound with the generator means already resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParts {
    /// Invariant class means `μ_c`.
    pub class_means: Vec<Vec<f64>>,
    /// Spurious class means of the (mixed) training environment.
    pub train_spurious: Vec<Vec<f64>>,
    /// Spurious class means of the test environment.
    pub test_spurious: Vec<Vec<f64>>,
    pub train: NodeSet,
    pub test: NodeSet,
    pub sigma2: f64,
}

/// Analysis parameters with no empirical estimator; used only by the
/// optional plug-in terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epsilon: f64,
    pub term_a: f64,
    pub term_b: f64,
    pub term_c: f64,
    pub max_feature_norm: f64,
    pub sigma2: f64,
    pub num_train: usize,
    pub num_test: usize,
    /// Weight-dependent term, present only when a classifier head is given.
    pub term_d: Option<f64>,
    pub constant: Option<f64>,
    /// Largest spectral norm of the head weights, for reporting.
    pub max_spectral_norm: Option<f64>,
    pub analysis: Option<AnalysisParams>,
    pub notes: Vec<String>,
}

/// Mean of each node's neighbor features; isolated nodes keep their own.
pub fn mean_aggregate(graph: &Graph) -> Tensor {
    let x = graph.features();
    let mut out = x.clone();
    for (i, nbrs) in graph.neighbor_lists().iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let row = out.row_mut(i);
        row.fill(0.0);
        for &j in nbrs {
            for (o, v) in row.iter_mut().zip(x.row(j)) {
                *o += v;
            }
        }
        let d = nbrs.len() as f64;
        row.iter_mut().for_each(|o| *o /= d);
    }
    out
}

/// `N × C` heterophilic neighbor ratios (own class column 0).
pub fn heterophilic_ratios(graph: &Graph) -> Tensor {
    let (n, c) = (graph.num_nodes(), graph.num_classes());
    let y = graph.labels();
    let mut out = Tensor::zeros(&[n, c]);
    for (i, nbrs) in graph.neighbor_lists().iter().enumerate() {
        let d = nbrs.len() as f64;
        for &j in nbrs {
            if y[j] != y[i] {
                out.set(i, y[j], out.get(i, y[j]) + 1.0 / d);
            }
        }
    }
    out
}

/// Nearest train row for every test row; ties go to the lowest index.
pub fn nearest_train(train: &Tensor, test: &Tensor) -> Vec<usize> {
    (0..test.rows())
        .map(|j| {
            let mut best = (f64::INFINITY, 0);
            for i in 0..train.rows() {
                let d = l2(train.row(i), test.row(j));
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        })
        .collect()
}

/// `Σ_c Σ_{c'≠c} |p_j(c'|c) − p_i(c'|c)|` where `p_i(·|c)` is node `i`'s
/// heterophilic ratio row if `yᵢ = c` and zero otherwise.
fn ratio_discrepancy(a: &NodeSet, i: usize, b: &NodeSet, j: usize) -> f64 {
    let (ra, rb) = (a.ratios.row(i), b.ratios.row(j));
    if a.labels[i] == b.labels[j] {
        ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum()
    } else {
        ra.iter().sum::<f64>() + rb.iter().sum::<f64>()
    }
}


pub fn bound_terms_from_parts(parts: &BoundParts) -> Result<BoundReport, MetricError> {
    let (train, test) = (&parts.train, &parts.test);
    if parts.sigma2.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(MetricError::NonPositiveVariance(parts.sigma2));
    }
    let c = parts.class_means.len();
    if parts.train_spurious.len() != c || parts.test_spurious.len() != c {
        return Err(MetricError::Shape("one spurious mean per class is required".into()));
    }
    let epsilon = epsilon_distance(&train.features, &test.features)?;
    let s2 = parts.sigma2;

    let mut sep = 0.0;
    for a in 0..c {
        for b in (0..c).filter(|&b| b != a) {
            let inv = l2(&parts.class_means[a], &parts.class_means[b]);
            let sp = l2(&parts.test_spurious[a], &parts.test_spurious[b]);
            sep += inv.hypot(sp).sqrt();
        }
    }
    let term_a = sep * epsilon / s2;

    let norm_of = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    let max_feature_norm = norm_of(&train.features).max(norm_of(&test.features));
    let shift: f64 = (0..c).map(|k| l2(&parts.test_spurious[k], &parts.train_spurious[k])).sum();
    let term_b = 2.0 * (c as f64 - 1.0) * max_feature_norm * shift / s2;

    // Near sets: each test node joins the set of its nearest train node.
    let matched = nearest_train(&train.features, &test.features);
    let mut sums = vec![0.0; train.len()];
    let mut sizes = vec![0usize; train.len()];
    for (j, &i) in matched.iter().enumerate() {
        sums[i] += ratio_discrepancy(test, j, train, i);
        sizes[i] += 1;
    }
    let nonempty: Vec<f64> = sums.iter().zip(&sizes).filter(|(_, &n)| n > 0).map(|(s, &n)| s / n as f64).collect();
    let term_c = nonempty.iter().sum::<f64>() / nonempty.len() as f64 / (2.0 * s2);

    Ok(BoundReport {
        epsilon,
        term_a,
        term_b,
        term_c,
        max_feature_norm,
        sigma2: s2,
        num_train: train.len(),
        num_test: test.len(),
        term_d: None,
        constant: None,
        max_spectral_norm: None,
        analysis: None,
        notes: vec!["term_d and the constant need a classifier head and analysis parameters; omitted".into()],
    })
}

/// Bound terms between the nodes of `train_envs` (mixed) and `test_env` of
/// a generated CSBM. Aggregation is one mean layer over the whole graph;
/// the training spurious means are the average over `train_envs`.
pub fn bound_terms(
    sample: &CsbmSample,
    train_envs: &[EnvId],
    test_env: EnvId,
    sigma2: f64,
) -> Result<BoundReport, MetricError> {
    let g = &sample.dataset.graph;
    let nodes_of = |pred: &dyn Fn(EnvId) -> bool| -> Vec<usize> {
        g.envs().iter().enumerate().filter(|&(_, &e)| pred(e)).map(|(i, _)| i).collect()
    };
    let train_nodes = nodes_of(&|e| train_envs.contains(&e));
    let test_nodes = nodes_of(&|e| e == test_env);
    if train_nodes.is_empty() {
        return Err(MetricError::EmptySet("train"));
    }
    if test_nodes.is_empty() {
        return Err(MetricError::EmptySet("test"));
    }
    let env_means = |e: EnvId| {
        usize::try_from(e).ok().and_then(|e| sample.env_means.get(e)).ok_or(MetricError::EmptySet("environment mean"))
    };
    let c = sample.class_means.len();
    let mut train_spurious = vec![vec![0.0; sample.class_means[0].len()]; c];
    for &e in train_envs {
        for (acc, m) in train_spurious.iter_mut().zip(env_means(e)?) {
            for (a, v) in acc.iter_mut().zip(m) {
                *a += v / train_envs.len() as f64;
            }
        }
    }
    let agg = mean_aggregate(g);
    let ratios = heterophilic_ratios(g);
    let parts = BoundParts {
        class_means: sample.class_means.clone(),
        train_spurious,
        test_spurious: env_means(test_env)?.clone(),
        train: NodeSet::gather(&agg, &ratios, g.labels(), &train_nodes),
        test: NodeSet::gather(&agg, &ratios, g.labels(), &test_nodes),
        sigma2,
    };
    bound_terms_from_parts(&parts)
}

/// Largest singular value by power iteration on `WᵀW`.
fn spectral_norm(w: &Tensor) -> f64 {
    let wt = w.transpose().expect("matrix");
    let mut v = Tensor::filled(&[w.cols(), 1], 1.0 / (w.cols() as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..200 {
        let u = wt.matmul(&w.matmul(&v).expect("shapes")).expect("shapes");
        let norm = u.sq_norm().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = u.map(|x| x / norm);
        sigma = norm.sqrt();
    }
    sigma
}

impl BoundReport {
    /// Adds the weight-dependent term and the constant for an MLP head with
    /// layer matrices `weights` (input to output).
    pub fn with_head(mut self, weights: &[Tensor], params: AnalysisParams) -> Self {
        let l = weights.len() as f64;
        let width = weights.iter().take(weights.len().saturating_sub(1)).map(|w| w.cols()).max().unwrap_or(0) as f64;
        let frob: f64 = weights.iter().map(|w| w.sq_norm()).sum();
        let n_tr = self.num_train as f64;
        let n_all = (self.num_train + self.num_test) as f64;
        let classes = weights.last().map_or(1, |w| w.cols()) as f64;
        self.term_d = Some(
            width * frob / ((params.gamma / 8.0).powf(2.0 / l) * n_tr.powf(params.alpha)) * self.epsilon.powf(2.0 / l),
        );
        self.constant = Some(
            1.0 / n_all.powf(1.0 - 2.0 * params.alpha)
                + (l * classes * (2.0 * self.max_feature_norm).powf(1.0 / l) / (params.gamma.powf(1.0 / l) * params.delta))
                    .ln()
                    / n_tr.powf(2.0 * params.alpha),
        );
        self.max_spectral_norm = Some(weights.iter().map(spectral_norm).fold(0.0, f64::max));
        self.analysis = Some(params);
        self.notes.clear();
        self
    }
}
