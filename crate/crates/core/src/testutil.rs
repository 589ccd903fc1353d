use rand::Rng;

use crate::graph::{Graph, Split};
use crate::rng::stream;
use crate::synth::normal;
use crate::tensor::Tensor;

/// Erdős–Rényi graph with Gaussian features, random labels and two
/// environments.
pub fn random_graph(n: usize, p: f64, dim: usize, classes: usize, seed: u64) -> Graph {
    let mut rng = stream(seed, "testutil/graph");
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let feats = (0..n * dim).map(|_| normal(&mut rng)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let envs = (0..n).map(|i| (i % 2) as i64).collect();
    Graph::new(n, classes, edges, Tensor::matrix(n, dim, feats).unwrap(), labels, envs, vec![Split::Train; n]).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64, label: &str) -> Tensor {
    let mut rng = stream(seed, label);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(&mut rng)).collect()).unwrap()
}

pub fn random_perm(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, "testutil/perm");
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
