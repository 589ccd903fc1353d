use proptest::prelude::*;

use super::*;
use crate::rng::stream;
use crate::synth::{gen_csbm, normal, orthonormal_basis, CsbmConfig};
use crate::testutil::random_tensor;

fn t(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn accuracy_examples() {
    let logits = t(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![1.0, 1.0]]);
    assert_eq!(ood_accuracy(&logits, &[0, 1, 0], &[0, 1]).unwrap(), 1.0);
    // Ties go to class 0.
    assert_eq!(ood_accuracy(&logits, &[0, 1, 0], &[2]).unwrap(), 1.0);
    assert_eq!(ood_accuracy(&logits, &[0, 1, 1], &[2]).unwrap(), 0.0);
    assert_eq!(ood_accuracy(&logits, &[0, 1, 0], &[]), Err(MetricError::EmptyMask));
}

#[test]
fn all_tied_logits_score_class_zero_frequency() {
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let logits = Tensor::filled(&[10, 3], 0.5);
    let rows: Vec<usize> = (0..10).collect();
    assert_eq!(ood_accuracy(&logits, &labels, &rows).unwrap(), 0.4);
}

#[test]
fn random_logits_give_chance_accuracy() {
    let n = 4000;
    let logits = random_tensor(&[n, 4], 3, "logits");
    let mut rng = stream(3, "labels");
    let labels: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..4)).collect();
    let acc = ood_accuracy(&logits, &labels, &(0..n).collect::<Vec<_>>()).unwrap();
    assert!((acc - 0.25).abs() < 0.05, "{acc}");
}

#[test]
fn invariant_variance_examples() {
    let same = Tensor::filled(&[5, 4], 1.5);
    assert_eq!(invariant_variance(&same, &[0, 0, 1, 1, 1]).unwrap(), 0.0);
    let two = t(&[vec![0.0, 0.0, 9.0, 9.0], vec![2.0, 0.0, -9.0, 1.0]]);
    // Population convention: E‖x − μ‖² = (1 + 1) / 2.
    assert_eq!(invariant_variance(&two, &[0, 0]).unwrap(), 1.0);
    // A singleton class is skipped.
    let three = t(&[vec![0.0, 0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0, 0.0], vec![50.0, 50.0, 0.0, 0.0]]);
    assert_eq!(invariant_variance(&three, &[0, 0, 1]).unwrap(), 1.0);
    assert!(invariant_variance(&Tensor::zeros(&[2, 3]), &[0, 0]).is_err());
}

#[test]
fn spurious_norm_examples() {
    assert_eq!(spurious_norm(&t(&[vec![5.0, 5.0, 0.0, 0.0]])).unwrap(), 0.0);
    let r = t(&[vec![1.0, 1.0, 3.0, 4.0], vec![0.0, 0.0, 0.0, 1.0]]);
    assert_eq!(spurious_norm(&r).unwrap(), 3.0);
}

#[test]
fn margin_loss_examples() {
    let logits = t(&[vec![3.0, 1.0], vec![0.0, 2.0]]);
    assert_eq!(margin_loss(&logits, &[0, 1], &[0, 1], 0.0).unwrap(), 0.0);
    assert_eq!(margin_loss(&logits, &[0, 1], &[0, 1], f64::INFINITY).unwrap(), 1.0);
    assert_eq!(margin_loss(&logits, &[0, 1], &[0, 1], 2.0).unwrap(), 1.0);
    assert_eq!(margin_loss(&logits, &[0, 1], &[0, 1], 1.9).unwrap(), 0.0);
}

#[test]
fn margin_loss_matches_per_node_check() {
    let logits = random_tensor(&[200, 5], 9, "m");
    let labels: Vec<usize> = (0..200).map(|i| (i * 7) % 5).collect();
    let rows: Vec<usize> = (0..200).step_by(3).collect();
    for gamma in [0.0, 0.3, 1.0] {
        let mut bad = 0;
        for &i in &rows {
            let y = labels[i];
            let mut worst = f64::NEG_INFINITY;
            for c in 0..5 {
                if c != y && logits.get(i, c) > worst {
                    worst = logits.get(i, c);
                }
            }
            if logits.get(i, y) <= gamma + worst {
                bad += 1;
            }
        }
        let want = bad as f64 / rows.len() as f64;
        assert_eq!(margin_loss(&logits, &labels, &rows, gamma).unwrap(), want);
    }
}

#[test]
fn epsilon_examples() {
    let train = t(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
    assert_eq!(epsilon_distance(&train, &train).unwrap(), 0.0);
    assert_eq!(epsilon_distance(&train, &t(&[vec![0.5, 0.0]])).unwrap(), 0.5);
    assert_eq!(epsilon_distance(&train, &Tensor::zeros(&[0, 2])), Err(MetricError::EmptySet("test")));
}

#[test]
fn epsilon_matches_double_loop() {
    let a = random_tensor(&[17, 3], 1, "a");
    let b = random_tensor(&[11, 3], 1, "b");
    let mut want = 0.0f64;
    for j in 0..11 {
        let mut best = f64::INFINITY;
        for i in 0..17 {
            let d: f64 = (0..3).map(|k| (a.get(i, k) - b.get(j, k)).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
        want = want.max(best);
    }
    assert_eq!(epsilon_distance(&a, &b).unwrap(), want);
}

fn csbm(homophily: Vec<f64>, nodes_per_class: usize, seed: u64) -> crate::synth::CsbmSample {
    let shared = orthonormal_basis(3, 4, &mut stream(seed, "shared"));
    gen_csbm(&CsbmConfig {
        num_classes: 3,
        feature_dim: 8,
        num_envs: 2,
        env_means: Some(vec![shared.clone(), shared]),
        homophily,
        nodes_per_class,
        mean_degree: 6.0,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn zero_shift_gives_zero_terms() {
    let s = csbm(vec![0.7], 30, 1);
    let r = bound_terms(&s, &[0], 0, 0.1).unwrap();
    assert_eq!(r.epsilon, 0.0);
    assert_eq!(r.term_a, 0.0);
    assert_eq!(r.term_b, 0.0);
    assert_eq!(r.term_c, 0.0);
    assert!(r.max_feature_norm > 0.0);
}

#[test]
fn equal_spurious_means_give_zero_term_b() {
    let s = csbm(vec![0.9, 0.3], 30, 2);
    let r = bound_terms(&s, &[0], 1, 0.1).unwrap();
    assert_eq!(r.term_b, 0.0);
    assert!(r.term_c > 0.0 && r.epsilon > 0.0);
}

#[test]
fn spurious_shift_increases_term_b() {
    let s = gen_csbm(&CsbmConfig::default()).unwrap();
    let r = bound_terms(&s, &[0], 1, 0.1).unwrap();
    assert!(r.term_b > 0.0);
}

#[test]
fn term_c_grows_with_heterophily_shift() {
    let values: Vec<f64> = [0.0, 0.1, 0.2, 0.3]
        .iter()
        .map(|d| bound_terms(&csbm(vec![0.7, 0.7 - d], 60, 5), &[0], 1, 0.1).unwrap().term_c)
        .collect();
    assert!(values.windows(2).all(|w| w[1] > w[0]), "{values:?}");
}

#[test]
fn zero_variance_is_rejected() {
    let s = csbm(vec![0.7], 5, 1);
    assert_eq!(bound_terms(&s, &[0], 1, 0.0), Err(MetricError::NonPositiveVariance(0.0)));
}

/// Direct transcription: explicit `C × C` tables `p_i(c'|c)`, near sets by
/// scanning every train node for each test node.
fn brute_term_c(parts: &BoundParts) -> f64 {
    let (tr, te) = (&parts.train, &parts.test);
    let c = parts.class_means.len();
    let table = |s: &NodeSet, i: usize| {
        let mut p = vec![vec![0.0; c]; c];
        for k in 0..c {
            if k != s.labels[i] {
                p[s.labels[i]][k] = s.ratios.get(i, k);
            }
        }
        p
    };
    let dist = |i: usize, j: usize| -> f64 {
        (0..tr.features.cols()).map(|k| (tr.features.get(i, k) - te.features.get(j, k)).powi(2)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    let mut sets = 0;
    for i in 0..tr.len() {
        let members: Vec<usize> = (0..te.len())
            .filter(|&j| {
                let d = dist(i, j);
                (0..tr.len()).all(|k| dist(k, j) > d || (dist(k, j) == d && k >= i))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let pi = table(tr, i);
        let mut s = 0.0;
        for &j in &members {
            let pj = table(te, j);
            for a in 0..c {
                for b in 0..c {
                    if a != b {
                        s += (pj[a][b] - pi[a][b]).abs();
                    }
                }
            }
        }
        total += s / members.len() as f64;
        sets += 1;
    }
    total / sets as f64 / (2.0 * parts.sigma2)
}

fn parts_of(s: &crate::synth::CsbmSample) -> BoundParts {
    let g = &s.dataset.graph;
    let agg = mean_aggregate(g);
    let ratios = heterophilic_ratios(g);
    let nodes = |e: i64| -> Vec<usize> { (0..g.num_nodes()).filter(|&i| g.envs()[i] == e).collect() };
    BoundParts {
        class_means: s.class_means.clone(),
        train_spurious: s.env_means[0].clone(),
        test_spurious: s.env_means[1].clone(),
        train: NodeSet::gather(&agg, &ratios, g.labels(), &nodes(0)),
        test: NodeSet::gather(&agg, &ratios, g.labels(), &nodes(1)),
        sigma2: 0.1,
    }
}

#[test]
fn term_c_matches_brute_force_on_small_graphs() {
    for seed in 0..20 {
        // 3 classes × 3 nodes × 2 envs = 18 nodes.
        let s = csbm(vec![0.6, 0.2], 3, seed);
        let parts = parts_of(&s);
        let fast = bound_terms_from_parts(&parts).unwrap().term_c;
        let slow = brute_term_c(&parts);
        assert!((fast - slow).abs() <= 1e-10, "seed {seed}: {fast} vs {slow}");
    }
}

#[test]
fn heterophilic_ratios_and_aggregation_by_hand() {
    use crate::graph::{Graph, Split};
    let g = Graph::new(
        4,
        2,
        vec![(0, 1), (0, 2), (0, 3)],
        t(&[vec![1.0], vec![2.0], vec![4.0], vec![6.0]]),
        vec![0, 0, 1, 1],
        vec![0; 4],
        vec![Split::Train; 4],
    )
    .unwrap();
    let r = heterophilic_ratios(&g);
    assert_eq!(r.row(0), &[0.0, 2.0 / 3.0]);
    assert_eq!(r.row(1), &[0.0, 0.0]);
    assert_eq!(r.row(2), &[1.0, 0.0]);
    let a = mean_aggregate(&g);
    assert_eq!(a.data(), &[4.0, 1.0, 1.0, 1.0]);
}

#[test]
fn bound_terms_survive_node_relabeling() {
    let s = csbm(vec![0.8, 0.4], 10, 4);
    let base = bound_terms(&s, &[0], 1, 0.1).unwrap();
    let g = &s.dataset.graph;
    let perm = crate::testutil::random_perm(g.num_nodes(), 4);
    let mut shuffled = s.clone();
    shuffled.dataset.graph = g.permuted(&perm).unwrap();
    let r = bound_terms(&shuffled, &[0], 1, 0.1).unwrap();
    for (a, b) in [(base.term_a, r.term_a), (base.term_b, r.term_b), (base.term_c, r.term_c), (base.epsilon, r.epsilon)] {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn head_plug_in_terms() {
    let s = csbm(vec![0.8, 0.4], 10, 4);
    let r = bound_terms(&s, &[0], 1, 0.1).unwrap();
    assert!(r.term_d.is_none() && !r.notes.is_empty());
    let w = vec![t(&[vec![3.0, 0.0], vec![0.0, 1.0]]), t(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])];
    let r = r.with_head(&w, AnalysisParams { alpha: 0.1, delta: 0.05, gamma: 1.0 });
    assert!((r.max_spectral_norm.unwrap() - 3.0).abs() < 1e-9);
    assert!(r.term_d.unwrap() > 0.0 && r.constant.unwrap().is_finite());
}

fn random_set(n: usize, c: usize, seed: u64, label: &str) -> NodeSet {
    let mut rng = stream(seed, label);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut ratios = Tensor::zeros(&[n, c]);
    for (i, &y) in labels.iter().enumerate() {
        for k in (0..c).filter(|&k| k != y) {
            ratios.set(i, k, normal(&mut rng).abs() / c as f64);
        }
    }
    NodeSet { features: random_tensor(&[n, 3], seed, &format!("{label}/g")), labels, ratios }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epsilon_zero_iff_every_test_point_is_a_train_point(seed in 0u64..500, extra in 0usize..3) {
        let train = random_tensor(&[6, 2], seed, "tr");
        let mut rows: Vec<Vec<f64>> = (0..4).map(|i| train.row(i).to_vec()).collect();
        for k in 0..extra {
            rows.push(vec![10.0 + k as f64, 0.0]);
        }
        let eps = epsilon_distance(&train, &t(&rows)).unwrap();
        prop_assert_eq!(eps == 0.0, extra == 0);
    }

    #[test]
    fn term_c_monotone_under_worsening_shift(seed in 0u64..500, step in 0.0f64..0.5) {
        let c = 3;
        let train = random_set(8, c, seed, "train");
        let test = random_set(6, c, seed, "test");
        let parts = BoundParts {
            class_means: orthonormal_basis(c, 3, &mut stream(seed, "mu")),
            train_spurious: vec![vec![0.0; 3]; c],
            test_spurious: vec![vec![0.0; 3]; c],
            train: train.clone(),
            test: test.clone(),
            sigma2: 0.5,
        };
        let before = bound_terms_from_parts(&parts).unwrap().term_c;
        let matched = nearest_train(&train.features, &test.features);
        let mut worse = parts.clone();
        for (j, &i) in matched.iter().enumerate() {
            for k in (0..c).filter(|&k| k != test.labels[j]) {
                let x = test.ratios.get(j, k);
                let dir = if test.labels[j] == train.labels[i] && x < train.ratios.get(i, k) { -1.0 } else { 1.0 };
                worse.test.ratios.set(j, k, x + dir * step);
            }
        }
        let after = bound_terms_from_parts(&worse).unwrap().term_c;
        prop_assert!(after >= before - 1e-12, "{} < {}", after, before);
    }
}
